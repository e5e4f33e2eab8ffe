//! Confusion-matrix metrics and the negative-log Krichevsky-Trofimov score.
//!
//! The KT score of `c` correct answers out of `n` is
//! `S = -log10((c + 1/2) / (n + 1))`. Lower is better; a perfect classifier
//! approaches 0 as `n` grows. Base 10 is the only base under which the
//! published accuracy and S tables agree with each other.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::RowId;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and truth key sets differ (e.g. `{0}`)")]
    KeyMismatch(String),
    #[error("no rows were evaluated")]
    Empty,
    #[error("correct count {correct} exceeds total {total}")]
    CountsOutOfRange { correct: u64, total: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn correct(&self) -> u64 {
        self.tp + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KtScore {
    pub s: f64,
    pub correct: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kt: KtScore,
    /// Precision had a zero denominator and was reported as 0.
    #[serde(default)]
    pub precision_degenerate: bool,
    /// Recall had a zero denominator and was reported as 0.
    #[serde(default)]
    pub recall_degenerate: bool,
}

pub fn confusion(
    predictions: &BTreeMap<RowId, String>,
    truth: &BTreeMap<RowId, String>,
    positive_label: &str,
) -> Result<ConfusionCounts, MetricsError> {
    if let Some(id) = predictions.keys().find(|k| !truth.contains_key(*k)) {
        return Err(MetricsError::KeyMismatch(id.to_string()));
    }
    if let Some(id) = truth.keys().find(|k| !predictions.contains_key(*k)) {
        return Err(MetricsError::KeyMismatch(id.to_string()));
    }
    let mut c = ConfusionCounts::default();
    for (id, pred) in predictions {
        let actual_pos = truth[id] == positive_label;
        let pred_pos = pred == positive_label;
        match (pred_pos, actual_pos) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn basic_metrics(c: ConfusionCounts) -> Result<MetricsReport, MetricsError> {
    let n = c.total();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let ratio = |num: u64, den: u64| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    let (precision, precision_degenerate) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_degenerate) = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(MetricsReport {
        counts: c,
        accuracy: c.correct() as f64 / n as f64,
        precision,
        recall,
        f1,
        kt: KtScore { s: kt_score(c.correct(), n)?, correct: c.correct(), total: n },
        precision_degenerate,
        recall_degenerate,
    })
}

/// Convenience: confusion counts followed by [`basic_metrics`].
pub fn evaluate(
    predictions: &BTreeMap<RowId, String>,
    truth: &BTreeMap<RowId, String>,
    positive_label: &str,
) -> Result<MetricsReport, MetricsError> {
    basic_metrics(confusion(predictions, truth, positive_label)?)
}

pub fn kt_score(correct: u64, total: u64) -> Result<f64, MetricsError> {
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    if correct > total {
        return Err(MetricsError::CountsOutOfRange { correct, total });
    }
    let ratio = (correct as f64 + 0.5) / (total as f64 + 1.0);
    // ratio < 1 always, so S > 0; clamp the sign of a rounding-level zero.
    Ok((-ratio.log10()).max(0.0))
}

/// Undoes the KT transform: the accuracy `c/n` whose score is `s`, with `c`
/// rounded to the nearest whole count and clamped into `[0, n]`.
pub fn kt_to_accuracy(s: f64, total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let c = ((total as f64 + 1.0) * 10f64.powf(-s) - 0.5).round();
    c.clamp(0.0, total as f64) / total as f64
}

/// `-log10(accuracy)`: the large-`n` limit of the KT score.
pub fn neg_log10_accuracy(accuracy: f64) -> f64 {
    -accuracy.log10()
}
