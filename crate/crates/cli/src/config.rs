//! Run configuration: one TOML file with `[model]`, `[training]`,
//! `[features]` and `[paths]` tables. Unknown keys are rejected and every
//! command-line flag overrides the matching key.

use std::path::{Path, PathBuf};

use crosstask_core::dsp::LogMelConfig;
use crosstask_core::models::ModelSpec;
use crosstask_core::training::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub model_out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub teachers: Vec<PathBuf>,
    /// Directory for cached log-mel features.
    pub feature_cache: Option<PathBuf>,
    /// Fold held out for per-epoch evaluation.
    pub eval_fold: Option<u32>,
    /// Train one model per fold of a k-fold split.
    pub kfold: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub training: TrainingConfig,
    pub features: LogMelConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Loads `path` if given, otherwise starts from defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Keeps the model's mel count in step with the front end.
    pub fn sync(&mut self) {
        self.model.n_mels = self.features.n_mels;
    }
}
