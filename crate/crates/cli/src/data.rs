//! Clip loading: WAV → resampled mono → log-mel, with an optional on-disk
//! feature cache and `.asce` embedding sidecars.

use std::path::{Path, PathBuf};

use crosstask_core::dsp::{
    decode_wav, log_mel, read_feature_cache, resample_linear, write_feature_cache, DspError,
    LogMelConfig,
};
use crosstask_core::manifest::DatasetManifest;
use crosstask_core::models::{read_embeddings, EmbedderVariant, ModelInput, ModelSpec};
use crosstask_core::tensor::Tensor;
use crosstask_core::training::Sample;

use crate::CliError;

fn dsp_err(e: DspError) -> CliError {
    CliError::Data(e.to_string())
}

fn fnv(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Log-mel features `[T, n_mels]` of one WAV file.
pub fn clip_features(path: &Path, config: &LogMelConfig) -> Result<Tensor<f32>, CliError> {
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (samples, sr) = decode_wav(path).map_err(dsp_err)?;
    let samples = if sr == config.sample_rate_hz {
        samples
    } else {
        resample_linear(&samples, sr, config.sample_rate_hz)
    };
    let features = log_mel(&samples, config).map_err(|e| match e {
        DspError::TooShort { .. } => CliError::Data(format!("{}: {e}", path.display())),
        other => dsp_err(other),
    })?;
    Ok(features.frames)
}

/// Like [`clip_features`] but reuses `cache_dir/<path hash>-<config hash>.ascf`.
pub fn cached_features(path: &Path, config: &LogMelConfig, cache_dir: Option<&Path>) -> Result<Tensor<f32>, CliError> {
    let Some(dir) = cache_dir else {
        return clip_features(path, config);
    };
    let key = dir.join(format!(
        "{:016x}-{:016x}.ascf",
        fnv(&path.to_string_lossy()),
        config.digest()
    ));
    if key.exists() {
        if let Ok(t) = read_feature_cache(&key) {
            if t.shape()[1] == config.n_mels {
                return Ok(t);
            }
        }
    }
    let frames = clip_features(path, config)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let matrix = crosstask_core::dsp::FeatureMatrix {
        frames,
        source: Some(path.to_path_buf()),
        config_hash: config.digest(),
    };
    write_feature_cache(&key, &matrix).map_err(dsp_err)?;
    Ok(matrix.frames)
}

/// Embedding sidecar next to a clip: same stem, `.asce` extension.
pub fn sidecar_path(wav: &Path) -> PathBuf {
    wav.with_extension("asce")
}

fn needs_sidecar(spec: &ModelSpec) -> bool {
    spec.kind.uses_embedder() && spec.embedder.variant == EmbedderVariant::FileBacked
}

/// Model input for one clip, reading the sidecar when `with_sidecar`.
pub fn clip_input(
    path: &Path,
    config: &LogMelConfig,
    with_sidecar: bool,
    cache_dir: Option<&Path>,
) -> Result<ModelInput<f32>, CliError> {
    let features = cached_features(path, config, cache_dir)?;
    let embeddings = if with_sidecar {
        let side = sidecar_path(path);
        Some(read_embeddings(&side).map_err(|e| CliError::Data(format!("{}: {e}", side.display())))?)
    } else {
        None
    };
    Ok(ModelInput {
        features,
        embeddings,
    })
}

/// Loads every clip of `manifest` as a labelled sample for models built
/// from `specs`; labels index into `classes`.
pub fn load_samples(
    manifest: &DatasetManifest,
    classes: &[String],
    config: &LogMelConfig,
    specs: &[&ModelSpec],
    cache_dir: Option<&Path>,
) -> Result<Vec<Sample<f32>>, CliError> {
    let labels = manifest.labels(classes).map_err(|e| CliError::Data(e.to_string()))?;
    let with_sidecar = specs.iter().any(|s| needs_sidecar(s));
    manifest
        .records
        .iter()
        .zip(labels)
        .map(|(r, label)| {
            Ok(Sample {
                input: clip_input(&manifest.resolve(r), config, with_sidecar, cache_dir)?,
                label,
            })
        })
        .collect()
}
