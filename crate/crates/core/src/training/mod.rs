//! Losses, knowledge distillation, Adam with a warmup schedule, folds,
//! metrics and the training loop.

mod folds;
mod losses;
mod metrics;
mod optim;
mod trainer;

pub use folds::kfold_split;
pub use losses::{
    cross_entropy_hard, cross_entropy_hard_tape, distill_loss, distill_loss_tape, entropy,
    validate_probabilities,
};
pub use metrics::{class_report, macro_accuracy, macro_accuracy_over, ClassCounts, ClassReport};
pub use optim::{adam_step, warmup_lr, AdamState, OptimizerConfig};
pub use trainer::{
    evaluate, teacher_soft_labels, train, Combine, EpochRecord, Evaluation, Sample, Split,
    TeacherEnsemble, TrainingConfig,
};

use crate::models::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("label {label} outside 0..{n_classes}")]
    InvalidLabel { label: usize, n_classes: usize },
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("fold error: {0}")]
    Fold(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("data error: {0}")]
    Data(String),
}

impl TrainError {
    /// Whether training diverged numerically rather than being misconfigured.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite(_)
                | TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}
