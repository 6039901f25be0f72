//! Confusion-matrix metrics: weighted average recall (overall accuracy) and
//! unweighted average recall (mean per-class recall).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// rows = true class, columns = predicted class
    pub confusion: Vec<Vec<u64>>,
    /// `None` for classes with no true samples
    pub per_class_recall: Vec<Option<f64>>,
    pub war: f64,
    pub uar: f64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("confusion matrix is empty".into()));
        }
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let per_class_recall: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        let uar = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MetricsReport {
            war: correct as f64 / total as f64,
            uar,
            confusion,
            per_class_recall,
        })
    }

    pub fn from_predictions(
        num_classes: usize,
        truth: &[usize],
        predicted: &[usize],
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "class index out of range: truth {t}, predicted {p}, K = {num_classes}"
                )));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
