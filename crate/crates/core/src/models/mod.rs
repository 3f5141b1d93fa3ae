//! The four scene classifiers and everything needed to build, run and
//! persist them.
//!
//! | kind | input path |
//! |------|------------|
//! | Base | log-mel → 4-layer CNN → attention pool → linear |
//! | VFM  | event embeddings → the same CNN/pool/linear stack |
//! | JRM  | log-mel CNN branch and 7-layer embedding CNN branch, pooled and concatenated |
//! | CMAM | embeddings + positions → self-attention stack → cross-attention over CNN frames → pool |
//!
//! All widths come from [`ModelSpec`]; [`ModelSpec::scale_factor`] shrinks
//! them uniformly for desk-sized runs.

mod arch;
mod embedder;
mod format;
pub mod params;

pub use arch::{layout, min_raw_frames, ForwardOutput, ModelInput};
pub use embedder::{read_embeddings, write_embeddings, EmbedderSpec, EmbedderVariant};
pub use format::{load_model, read_model, save_model, write_model, FormatError, ModelHeader};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::LogMelConfig;
use crate::tensor::{Real, Tape, Tensor, TensorError};
use params::{BoundParams, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Base,
    Vfm,
    Jrm,
    Cmam,
}

impl ModelKind {
    pub fn uses_embedder(self) -> bool {
        !matches!(self, ModelKind::Base)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Self::Base),
            "vfm" => Ok(Self::Vfm),
            "jrm" => Ok(Self::Jrm),
            "cmam" => Ok(Self::Cmam),
            other => Err(format!("unknown model kind `{other}`")),
        }
    }
}

/// How the event embedder takes part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Pre-trained embedder weights stay fixed.
    FeatureBased,
    /// Pre-trained embedder weights are updated with the rest.
    FineTuning,
    /// Embedder re-initialised randomly and trained.
    FromScratch,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "feature_based" => Ok(Self::FeatureBased),
            "fine_tuning" => Ok(Self::FineTuning),
            "from_scratch" => Ok(Self::FromScratch),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_classes: usize,
    /// Width of the raw log-mel input.
    pub n_mels: usize,
    /// Base/VFM encoder and the JRM raw branch.
    pub cnn_channels: Vec<usize>,
    /// JRM embedding branch.
    pub jrm_channels: Vec<usize>,
    pub kernel_size: usize,
    pub pool_window: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub d_model: usize,
    pub pool_heads: usize,
    pub pool_attn_dim: usize,
    pub dropout: f64,
    /// Standardise each clip's log-mel matrix to zero mean, unit variance
    /// before it enters any encoder.
    pub normalize_input: bool,
    /// Multiplies every channel and model width.
    pub scale_factor: f64,
    pub strategy: Strategy,
    pub embedder: EmbedderSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Base,
            n_classes: 10,
            n_mels: 64,
            cnn_channels: vec![64, 128, 256, 512],
            jrm_channels: vec![64, 128, 256, 512, 1024, 1024, 2048],
            kernel_size: 3,
            pool_window: 2,
            attn_layers: 12,
            attn_heads: 8,
            d_model: 2048,
            pool_heads: 4,
            pool_attn_dim: 1024,
            dropout: 0.1,
            normalize_input: true,
            scale_factor: 0.125,
            strategy: Strategy::FeatureBased,
            embedder: EmbedderSpec::default(),
        }
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind, n_classes: usize) -> Self {
        Self {
            kind,
            n_classes,
            ..Self::default()
        }
    }

    fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.scale_factor).round() as usize).max(1)
    }

    pub fn effective_cnn_channels(&self) -> Vec<usize> {
        self.cnn_channels.iter().map(|&c| self.scaled(c)).collect()
    }

    pub fn effective_jrm_channels(&self) -> Vec<usize> {
        self.jrm_channels.iter().map(|&c| self.scaled(c)).collect()
    }

    /// Scaled model width, rounded to the nearest multiple of the head count.
    pub fn effective_d_model(&self) -> usize {
        let h = self.attn_heads.max(1);
        let raw = self.d_model as f64 * self.scale_factor / h as f64;
        (raw.round() as usize).max(1) * h
    }

    pub fn effective_pool_attn_dim(&self) -> usize {
        self.scaled(self.pool_attn_dim)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Spec(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.cnn_channels.is_empty() || self.jrm_channels.is_empty() {
            return bad("channel lists must be non-empty".into());
        }
        if self.cnn_channels.contains(&0) || self.jrm_channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.attn_heads == 0 || !self.d_model.is_multiple_of(self.attn_heads) {
            return bad(format!(
                "d_model {} must be divisible by attn_heads {}",
                self.d_model, self.attn_heads
            ));
        }
        if !self.effective_d_model().is_multiple_of(2) {
            return bad("scaled d_model must be even for positional encoding".into());
        }
        if self.pool_heads == 0 || self.pool_attn_dim == 0 {
            return bad("attention pooling needs at least one head and width".into());
        }
        if self.kernel_size.is_multiple_of(2) || self.pool_window == 0 {
            return bad("kernel size must be odd and pool window positive".into());
        }
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return bad(format!("scale_factor {} outside (0, 1]", self.scale_factor));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        self.embedder.validate().map_err(ModelError::Spec)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("input has {got} frames; this encoder needs at least {required}")]
    InputTooShort { required: usize, got: usize },
    #[error("input width {got} does not match the model's {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("{0:?} model needs event embeddings but none were supplied")]
    MissingEmbeddings(ModelKind),
    #[error("strategy {strategy:?} is not available: {reason}")]
    Strategy { strategy: Strategy, reason: String },
}

/// A materialised model: spec, class vocabulary, front-end settings and
/// the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInstance<F> {
    pub spec: ModelSpec,
    pub classes: Vec<String>,
    pub features: LogMelConfig,
    pub params: ParamStore<F>,
}

pub(crate) const EMBEDDER_PREFIX: &str = "embedder.";

impl<F: Real> ModelInstance<F> {
    /// Initialises parameters from `seed`. Surrogate embedder weights are
    /// drawn from the embedder's own seed unless training from scratch.
    pub fn new(
        spec: ModelSpec,
        classes: Vec<String>,
        features: LogMelConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        if classes.len() != spec.n_classes {
            return Err(ModelError::Spec(format!(
                "{} class names for n_classes = {}",
                classes.len(),
                spec.n_classes
            )));
        }
        if features.n_mels != spec.n_mels {
            return Err(ModelError::Spec(format!(
                "feature config yields {} mels, model expects {}",
                features.n_mels, spec.n_mels
            )));
        }
        let decls = layout(&spec)?;
        let (embedder_decls, body_decls): (Vec<_>, Vec<_>) = decls
            .into_iter()
            .partition(|d| d.name.starts_with(EMBEDDER_PREFIX));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::init(&body_decls, &mut rng);
        let embedder_params = if spec.strategy == Strategy::FromScratch {
            ParamStore::<F>::init(&embedder_decls, &mut rng)
        } else {
            let mut pretrained = ChaCha8Rng::seed_from_u64(spec.embedder.seed);
            ParamStore::<F>::init(&embedder_decls, &mut pretrained)
        };
        for (name, t) in embedder_params.iter() {
            params.insert(name.clone(), t.clone());
        }
        Ok(Self {
            spec,
            classes,
            features,
            params,
        })
    }

    pub fn embedder(&self) -> Option<&EmbedderSpec> {
        self.spec.kind.uses_embedder().then_some(&self.spec.embedder)
    }

    pub fn is_embedder_param(name: &str) -> bool {
        name.starts_with(EMBEDDER_PREFIX)
    }

    /// Whether the optimiser updates `name` under the current strategy.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(Self::is_embedder_param(name) && self.spec.strategy == Strategy::FeatureBased)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| self.is_trainable(n))
            .cloned()
            .collect()
    }

    /// Scalar count of the parameters the optimiser sees.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        self.params.bind(tape, |n| self.is_trainable(n))
    }

    /// Converts precision, e.g. for 64-bit gradient checks.
    pub fn cast<G: Real>(&self) -> ModelInstance<G> {
        ModelInstance {
            spec: self.spec.clone(),
            classes: self.classes.clone(),
            features: self.features.clone(),
            params: self.params.cast(),
        }
    }

    /// Inference-mode logits `[n_classes]`.
    pub fn logits(&self, input: &ModelInput<F>) -> Result<Tensor<F>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &bound, input, false, &mut rng)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Softmax of [`ModelInstance::logits`].
    pub fn probabilities(&self, input: &ModelInput<F>) -> Result<Vec<F>, ModelError> {
        let logits = self.logits(input)?;
        Ok(softmax_vec(logits.data()))
    }
}

/// Exact number of scalar parameters held by `model`.
pub fn count_params<F: Real>(model: &ModelInstance<F>) -> usize {
    model.params.count()
}

/// Switches how the embedder is trained. Moving to
/// [`Strategy::FromScratch`] re-draws the embedder weights.
pub fn set_strategy<F: Real>(
    model: &mut ModelInstance<F>,
    strategy: Strategy,
) -> Result<(), ModelError> {
    let Some(embedder) = model.embedder() else {
        if strategy == Strategy::FromScratch {
            return Ok(());
        }
        return Err(ModelError::Strategy {
            strategy,
            reason: "model has no event embedder".into(),
        });
    };
    if embedder.variant == EmbedderVariant::FileBacked && strategy != Strategy::FeatureBased {
        return Err(ModelError::Strategy {
            strategy,
            reason: "file-backed embeddings have no trainable weights".into(),
        });
    }
    let was_scratch = model.spec.strategy == Strategy::FromScratch;
    let to_scratch = strategy == Strategy::FromScratch;
    if was_scratch != to_scratch {
        // Leaving scratch mode restores the pre-trained surrogate weights.
        let seed = if to_scratch {
            embedder.seed ^ 0x9e37_79b9_7f4a_7c15
        } else {
            embedder.seed
        };
        let decls: Vec<_> = layout(&model.spec)?
            .into_iter()
            .filter(|d| d.name.starts_with(EMBEDDER_PREFIX))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in decls {
            model.params.insert(d.name.clone(), d.sample(&mut rng));
        }
    }
    model.spec.strategy = strategy;
    Ok(())
}

pub(crate) fn softmax_vec<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
