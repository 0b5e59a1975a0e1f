//! Binary classification metrics with `Vulnerable` as the positive class.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codeprep::Label;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct MetricsError(pub String);

/// Confusion matrix plus derived scores.
///
/// `confusion[t][p]` counts samples with true label `t` predicted as `p`.
/// When a denominator is zero the affected score is 0 and `degenerate` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub confusion: [[u64; 2]; 2],
    pub n: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl EvalReport {
    pub fn from_confusion(confusion: [[u64; 2]; 2]) -> Result<Self, MetricsError> {
        let [[tn, fp], [fn_, tp]] = confusion;
        let n = tn + fp + fn_ + tp;
        if n == 0 {
            return Err(MetricsError("no samples to score".into()));
        }
        let mut degenerate = false;
        let mut ratio = |num: u64, den: u64| {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let accuracy = ratio(tp + tn, n);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            degenerate = true;
            0.0
        };
        Ok(EvalReport {
            confusion,
            n,
            accuracy,
            precision,
            recall,
            f1,
            degenerate,
        })
    }

    pub fn true_positives(&self) -> u64 {
        self.confusion[1][1]
    }

    pub fn false_positives(&self) -> u64 {
        self.confusion[0][1]
    }

    pub fn true_negatives(&self) -> u64 {
        self.confusion[0][0]
    }

    pub fn false_negatives(&self) -> u64 {
        self.confusion[1][0]
    }
}

pub fn compute_metrics(predictions: &[Label], labels: &[Label]) -> Result<EvalReport, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = [[0u64; 2]; 2];
    for (p, t) in predictions.iter().zip(labels) {
        confusion[t.index()][p.index()] += 1;
    }
    EvalReport::from_confusion(confusion)
}
