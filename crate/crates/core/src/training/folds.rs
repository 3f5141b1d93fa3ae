use super::TrainError;
use crate::manifest::DatasetManifest;

/// One split per fold: fold `i` (1-based) is held out in split `i - 1`.
pub fn kfold_split(manifest: &DatasetManifest, k: u32) -> Result<Vec<(DatasetManifest, DatasetManifest)>, TrainError> {
    if k < 2 {
        return Err(TrainError::Fold(format!("need at least 2 folds, got {k}")));
    }
    if let Some(r) = manifest.records.iter().find(|r| r.fold == 0 || r.fold > k) {
        return Err(TrainError::Fold(format!(
            "{} has fold {} outside 1..={k}",
            r.path.display(),
            r.fold
        )));
    }
    (1..=k)
        .map(|fold| {
            let eval = manifest.subset(|r| r.fold == fold);
            if eval.is_empty() {
                return Err(TrainError::Fold(format!("fold {fold} is empty")));
            }
            Ok((manifest.subset(|r| r.fold != fold), eval))
        })
        .collect()
}
