//! Dataset manifests: CSV with header `path,scene,fold`.
//!
//! Relative paths resolve against the manifest's directory. The class
//! vocabulary is the sorted set of distinct scene names.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub scene: String,
    pub fold: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, root: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let m = Self {
            records,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let file = std::fs::File::open(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_reader(file, root)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, root: PathBuf) -> Result<Self, ManifestError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "scene", "fold"] {
            return Err(ManifestError::Invalid(format!(
                "header must be `path,scene,fold`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let records = rdr.deserialize().collect::<Result<Vec<ManifestRecord>, _>>()?;
        Self::new(records, root)
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.fold == 0 {
                return Err(ManifestError::Invalid(format!(
                    "{}: folds are numbered from 1",
                    r.path.display()
                )));
            }
            if r.scene.is_empty() {
                return Err(ManifestError::Invalid(format!("{}: empty scene", r.path.display())));
            }
            if !seen.insert(&r.path) {
                return Err(ManifestError::Invalid(format!(
                    "duplicate path {}",
                    r.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct scene names.
    pub fn classes(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.scene.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn max_fold(&self) -> u32 {
        self.records.iter().map(|r| r.fold).max().unwrap_or(0)
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    /// Label indices into `classes`; errors on scenes outside it.
    pub fn labels(&self, classes: &[String]) -> Result<Vec<usize>, ManifestError> {
        self.records
            .iter()
            .map(|r| {
                classes.iter().position(|c| *c == r.scene).ok_or_else(|| {
                    ManifestError::Invalid(format!("scene `{}` is not in the vocabulary", r.scene))
                })
            })
            .collect()
    }

    pub fn subset(&self, keep: impl Fn(&ManifestRecord) -> bool) -> Self {
        Self {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            root: self.root.clone(),
        }
    }
}
