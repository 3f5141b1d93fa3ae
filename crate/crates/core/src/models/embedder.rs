//! Event embedder that stands in for a pre-trained event-detection network.
//!
//! The surrogate is a seeded two-layer random projection over log-mel
//! patches: every frame goes through `relu(x·W1 + b1)`, frames are averaged
//! within each patch, and `W2, b2` project the average to `embed_dim`.
//! File-backed embeddings are read from per-clip `ASCE` sidecars.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Init, ParamDecl};
use super::FormatError;
use crate::tensor::{Real, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderVariant {
    Surrogate,
    FileBacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSpec {
    pub variant: EmbedderVariant,
    pub embed_dim: usize,
    /// Log-mel frames per embedding (100 frames ≈ 1 s at a 10 ms hop).
    pub frames_per_embedding: usize,
    /// Surrogate hidden width.
    pub hidden: usize,
    /// Seed of the pre-trained surrogate weights.
    pub seed: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            variant: EmbedderVariant::Surrogate,
            embed_dim: 128,
            frames_per_embedding: 100,
            hidden: 256,
            seed: 0x00a5_ced0,
        }
    }
}

impl EmbedderSpec {
    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        if self.embed_dim == 0 || self.frames_per_embedding == 0 || self.hidden == 0 {
            return Err("embedder widths and patch length must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn declare(&self, n_mels: usize) -> Vec<ParamDecl> {
        if self.variant == EmbedderVariant::FileBacked {
            return Vec::new();
        }
        vec![
            ParamDecl::new(
                "embedder.w1",
                &[n_mels, self.hidden],
                Init::KaimingUniform { fan_in: n_mels },
            ),
            ParamDecl::new("embedder.b1", &[self.hidden], Init::Zeros),
            ParamDecl::new(
                "embedder.w2",
                &[self.hidden, self.embed_dim],
                Init::KaimingUniform { fan_in: self.hidden },
            ),
            ParamDecl::new("embedder.b2", &[self.embed_dim], Init::Zeros),
        ]
    }

    /// Patch boundaries over `t` frames: `max(1, t / P)` patches, the last
    /// one absorbing any remainder.
    pub fn patches(&self, t: usize) -> Vec<(usize, usize)> {
        let p = self.frames_per_embedding;
        let n = (t / p).max(1);
        (0..n)
            .map(|i| {
                let start = i * p;
                let end = if i + 1 == n { t } else { start + p };
                (start, end - start)
            })
            .collect()
    }
}

/// Weights of a bound surrogate.
pub(crate) struct SurrogateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `[T, n_mels]` log-mel → `[n_patches, embed_dim]` embeddings.
pub(crate) fn surrogate_forward<F: Real>(
    tape: &mut Tape<F>,
    spec: &EmbedderSpec,
    vars: &SurrogateVars,
    features: Var,
) -> Result<Var> {
    let (t, _) = tape.value(features).dims2()?;
    let hidden = tape.linear(features, vars.w1, Some(vars.b1))?;
    let hidden = tape.relu(hidden)?;
    let width = tape.value(hidden).shape()[1];
    let mut rows = Vec::new();
    for (start, len) in spec.patches(t) {
        let patch = tape.slice(hidden, 0, start, len)?;
        let mean = tape.mean_axis(patch, 0)?;
        rows.push(tape.reshape(mean, &[1, width])?);
    }
    let pooled = if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat(&rows, 0)?
    };
    tape.linear(pooled, vars.w2, Some(vars.b2))
}

const ASCE_MAGIC: &[u8; 4] = b"ASCE";

/// Writes an `ASCE` sidecar: magic, `T_e` u32, `D` u32, then f32 LE values.
pub fn write_embeddings(path: &Path, embeddings: &Tensor<f32>) -> std::result::Result<(), FormatError> {
    let (t, d) = embeddings
        .dims2()
        .map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let mut bytes = Vec::with_capacity(12 + 4 * embeddings.len());
    bytes.extend_from_slice(ASCE_MAGIC);
    bytes.extend_from_slice(&(t as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    for v in embeddings.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(FormatError::Io)
}

pub fn read_embeddings(path: &Path) -> std::result::Result<Tensor<f32>, FormatError> {
    let bytes = std::fs::read(path).map_err(FormatError::Io)?;
    if bytes.len() < 4 {
        return Err(FormatError::Truncated("magic"));
    }
    if &bytes[..4] != ASCE_MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated("embedding header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (t, d) = (word(4), word(8));
    let need = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Corrupt("embedding size overflows".into()))?;
    let body = &bytes[12..];
    if body.len() < need {
        return Err(FormatError::Truncated("embedding values"));
    }
    if body.len() > need {
        return Err(FormatError::Corrupt("trailing bytes after embeddings".into()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&[t, d], data).map_err(|e| FormatError::Corrupt(e.to_string()))
}
