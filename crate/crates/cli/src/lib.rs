//! Command-line runtime: synthetic corpus generation, training,
//! distillation, evaluation and single-clip classification.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

pub mod commands;
pub mod config;
pub mod data;
pub mod synth;

use std::path::Path;

use crosstask_core::models::{FormatError, ModelError};
use crosstask_core::training::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else if matches!(e, TrainError::Config(_)) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Spec(_) | ModelError::Strategy { .. } => CliError::Usage(e.to_string()),
            other => TrainError::from(other).into(),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}
