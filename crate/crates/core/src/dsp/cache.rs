//! `ASCF` feature cache: magic, version, `T`, `n_mels` (all u32 LE) and
//! then `T·n_mels` little-endian f32 values.

use std::path::Path;

use super::{DspError, FeatureMatrix};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ASCF";
const VERSION: u32 = 1;

pub fn write_feature_cache(path: &Path, features: &FeatureMatrix) -> Result<(), DspError> {
    let shape = features.frames.shape();
    let mut bytes = Vec::with_capacity(16 + 4 * features.frames.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(shape[0] as u32).to_le_bytes());
    bytes.extend_from_slice(&(shape[1] as u32).to_le_bytes());
    for v in features.frames.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|source| DspError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_feature_cache(path: &Path) -> Result<Tensor<f32>, DspError> {
    let bytes = std::fs::read(path).map_err(|source| DspError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |detail: &str| DspError::Cache {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(bad("unsupported version"));
    }
    let (t, m) = (word(8) as usize, word(12) as usize);
    if t == 0 || m == 0 {
        return Err(bad("empty matrix"));
    }
    let body = &bytes[16..];
    if body.len() != t * m * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&[t, m], data).map_err(|e| bad(&e.to_string()))
}
