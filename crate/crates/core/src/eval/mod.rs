//! Accuracy metrics, the synthetic benchmark and the ablation harness.

mod ablation;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablation::{run_ablation, AblationGrid, AblationReport, AblationRow, AggregatorSummary};
pub use synthetic::{generate_synthetic_dataset, SyntheticDataset, SyntheticSpec, SyntheticTruth};

/// Prediction that maps to no sense at all; always counted as wrong.
pub const NO_SENSE: usize = usize::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no test samples")]
    Empty,
    #[error("{name} out of range: {value}")]
    OutOfRange { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierMetrics {
    /// Planted outliers among the images that went through outlier removal.
    pub planted: usize,
    pub flagged: usize,
    pub true_positives: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Macro average of `per_class_accuracy`.
    pub aca: f64,
    pub micro_accuracy: f64,
    pub per_class_accuracy: BTreeMap<usize, f64>,
    /// Sorted label set; row and column order of `confusion`.
    pub classes: Vec<usize>,
    /// `confusion[r][c]`: samples of `classes[r]` predicted as `classes[c]`.
    pub confusion: Vec<Vec<u64>>,
    /// Per class, predictions outside the label set.
    pub unmatched: Vec<u64>,
    pub test_count: usize,
    #[serde(default)]
    pub config_echo: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outliers: Option<OutlierMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<u64>,
}

/// Macro-averaged accuracy with a confusion matrix over the label set.
pub fn average_classification_accuracy(predictions: &[usize], labels: &[usize]) -> Result<EvalReport, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let m = classes.len();
    let mut confusion = vec![vec![0u64; m]; m];
    let mut unmatched = vec![0u64; m];
    for (&p, &l) in predictions.iter().zip(labels) {
        let row = index[&l];
        match index.get(&p) {
            Some(&col) => confusion[row][col] += 1,
            None => unmatched[row] += 1,
        }
    }
    let mut per_class_accuracy = BTreeMap::new();
    let mut correct = 0u64;
    for (r, &c) in classes.iter().enumerate() {
        let total: u64 = confusion[r].iter().sum::<u64>() + unmatched[r];
        correct += confusion[r][r];
        per_class_accuracy.insert(c, confusion[r][r] as f64 / total as f64);
    }
    let aca = per_class_accuracy.values().sum::<f64>() / m as f64;
    Ok(EvalReport {
        aca,
        micro_accuracy: correct as f64 / labels.len() as f64,
        per_class_accuracy,
        classes,
        confusion,
        unmatched,
        test_count: labels.len(),
        config_echo: serde_json::Value::Null,
        outliers: None,
        runtime_ms: None,
    })
}

/// Recall and precision of `flagged` against `planted`, restricted to the
/// images in `considered`. An empty denominator yields 1.0.
pub fn outlier_metrics<'a>(
    flagged: impl IntoIterator<Item = &'a str>,
    planted: impl IntoIterator<Item = &'a str>,
    considered: &BTreeSet<&'a str>,
) -> OutlierMetrics {
    let flagged: BTreeSet<&str> = flagged.into_iter().filter(|id| considered.contains(id)).collect();
    let planted: BTreeSet<&str> = planted.into_iter().filter(|id| considered.contains(id)).collect();
    let tp = flagged.intersection(&planted).count();
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    OutlierMetrics {
        planted: planted.len(),
        flagged: flagged.len(),
        true_positives: tp,
        recall: ratio(tp, planted.len()),
        precision: ratio(tp, flagged.len()),
    }
}
