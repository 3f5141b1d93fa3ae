//! `ASCM` model files.
//!
//! ```text
//! "ASCM"  version:u32  header_len:u32  header:UTF-8 TOML
//! n_params:u32
//! n_params × { name_len:u32 name rank:u32 dims:u32×rank data:f32×numel }
//! checksum:u64   (FNV-1a 64 over every preceding byte)
//! ```
//!
//! All integers and floats are little-endian; parameters appear in sorted
//! name order. The loader checks names and shapes against the layout the
//! header implies, so a file either loads completely or not at all.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{layout, ModelInstance, ModelSpec};
use crate::dsp::LogMelConfig;
use crate::tensor::Tensor;

pub const ASCM_MAGIC: &[u8; 4] = b"ASCM";
pub const ASCM_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 1 << 12;
const MAX_RANK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("checksum mismatch")]
    ChecksumMismatch,
}

/// Everything besides the parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub classes: Vec<String>,
    pub spec: ModelSpec,
    pub features: LogMelConfig,
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), FormatError> {
    let v = u32::try_from(v).map_err(|_| FormatError::Corrupt(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialises `model` to `ASCM` bytes.
pub fn write_model(model: &ModelInstance<f32>) -> Result<Vec<u8>, FormatError> {
    let header = ModelHeader {
        classes: model.classes.clone(),
        spec: model.spec.clone(),
        features: model.features.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + text.len() + 4 * model.params.count());
    out.extend_from_slice(ASCM_MAGIC);
    out.extend_from_slice(&ASCM_VERSION.to_le_bytes());
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn save_model(path: &Path, model: &ModelInstance<f32>) -> Result<(), FormatError> {
    std::fs::write(path, write_model(model)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses `ASCM` bytes. Never panics; every failure maps to a
/// [`FormatError`] category.
pub fn read_model(bytes: &[u8]) -> Result<ModelInstance<f32>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != ASCM_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != ASCM_VERSION as usize {
        return Err(FormatError::UnsupportedVersion(version as u32));
    }
    let header_len = r.u32("header length")?;
    let header_bytes = r.take(header_len, "header")?;
    let text = std::str::from_utf8(header_bytes)
        .map_err(|e| FormatError::Corrupt(format!("header is not UTF-8: {e}")))?;
    let header: ModelHeader =
        toml::from_str(text).map_err(|e| FormatError::Corrupt(format!("header: {e}")))?;
    if header.classes.len() != header.spec.n_classes {
        return Err(FormatError::Corrupt(format!(
            "{} classes for n_classes = {}",
            header.classes.len(),
            header.spec.n_classes
        )));
    }
    if header.features.n_mels != header.spec.n_mels {
        return Err(FormatError::Corrupt("feature and model mel counts differ".into()));
    }
    header
        .features
        .validate()
        .map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let expected: BTreeMap<String, Vec<usize>> = layout(&header.spec)
        .map_err(|e| FormatError::Corrupt(e.to_string()))?
        .into_iter()
        .map(|d| (d.name, d.shape))
        .collect();

    let n_params = r.u32("parameter count")?;
    if n_params != expected.len() {
        return Err(FormatError::Corrupt(format!(
            "{n_params} parameters, layout has {}",
            expected.len()
        )));
    }
    let mut params = ParamStore::new();
    let mut expected_iter = expected.iter();
    for _ in 0..n_params {
        let name_len = r.u32("parameter name length")?;
        if name_len > MAX_NAME_LEN {
            return Err(FormatError::Corrupt(format!("name length {name_len}")));
        }
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| FormatError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = r.u32("parameter rank")?;
        if rank > MAX_RANK {
            return Err(FormatError::Corrupt(format!("rank {rank} for `{name}`")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("parameter dims")?);
        }
        let (want_name, want_shape) = expected_iter
            .next()
            .ok_or_else(|| FormatError::Corrupt("too many parameters".into()))?;
        if name != want_name || &dims != want_shape {
            return Err(FormatError::Corrupt(format!(
                "found `{name}` {dims:?}, expected `{want_name}` {want_shape:?}"
            )));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FormatError::Corrupt(format!("size of `{name}` overflows")))?;
        if numel > r.remaining() {
            return Err(FormatError::Truncated("tensor data"));
        }
        let data = r
            .take(numel, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        params.insert(name, t);
    }
    let body_end = r.pos;
    let stored = r.take(8, "checksum")?;
    let stored = u64::from_le_bytes(stored.try_into().expect("eight bytes"));
    if r.remaining() != 0 {
        return Err(FormatError::Corrupt(format!("{} trailing bytes", r.remaining())));
    }
    if stored != fnv1a64(&bytes[..body_end]) {
        return Err(FormatError::ChecksumMismatch);
    }
    Ok(ModelInstance {
        spec: header.spec,
        classes: header.classes,
        features: header.features,
        params,
    })
}

pub fn load_model(path: &Path) -> Result<ModelInstance<f32>, FormatError> {
    read_model(&std::fs::read(path)?)
}
