use super::TrainError;

/// Correct/total counts for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

impl ClassCounts {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Per-class counts plus the confusion matrix (`[label][prediction]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub rows: Vec<ClassCounts>,
    pub confusion: Vec<Vec<usize>>,
}

impl ClassReport {
    /// Mean of per-class accuracies over classes that have samples.
    pub fn macro_accuracy(&self) -> f64 {
        let present: Vec<_> = self.rows.iter().filter(|r| r.total > 0).collect();
        present.iter().map(|r| r.accuracy()).sum::<f64>() / present.len() as f64
    }

    pub fn pooled_accuracy(&self) -> f64 {
        let correct: usize = self.rows.iter().map(|r| r.correct).sum();
        let total: usize = self.rows.iter().map(|r| r.total).sum();
        correct as f64 / total as f64
    }
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<(), TrainError> {
    if predictions.len() != labels.len() {
        return Err(TrainError::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(TrainError::Metric("no samples".into()));
    }
    Ok(())
}

pub fn class_report(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<ClassReport, TrainError> {
    check_lengths(predictions, labels)?;
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(TrainError::Metric(format!(
                "class index {} outside 0..{n_classes}",
                p.max(l)
            )));
        }
        confusion[l][p] += 1;
    }
    let rows = (0..n_classes)
        .map(|c| ClassCounts {
            class: c,
            correct: confusion[c][c],
            total: confusion[c].iter().sum(),
        })
        .collect();
    Ok(ClassReport { rows, confusion })
}

/// Mean over the classes present in `labels` of per-class accuracy.
pub fn macro_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, TrainError> {
    check_lengths(predictions, labels)?;
    let n = predictions.iter().chain(labels).max().map_or(0, |&m| m + 1);
    Ok(class_report(predictions, labels, n)?.macro_accuracy())
}

/// Macro accuracy over an explicit class list; a listed class with no
/// samples is an error.
pub fn macro_accuracy_over(predictions: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64, TrainError> {
    check_lengths(predictions, labels)?;
    if classes.is_empty() {
        return Err(TrainError::Metric("empty class list".into()));
    }
    let mut sum = 0.0;
    for &c in classes {
        let total = labels.iter().filter(|&&l| l == c).count();
        if total == 0 {
            return Err(TrainError::Metric(format!("class {c} has no samples")));
        }
        let correct = labels
            .iter()
            .zip(predictions)
            .filter(|(&l, &p)| l == c && p == c)
            .count();
        sum += correct as f64 / total as f64;
    }
    Ok(sum / classes.len() as f64)
}
