//! Threshold-free detection metrics with in-distribution as the positive
//! class, plus classification accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no {0} scores")]
    Empty(&'static str),
    #[error("non-finite {0} score")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherIsId,
    LowerIsId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInput {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub orientation: Orientation,
}

impl EvalInput {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Self {
        Self {
            id_scores,
            ood_scores,
            orientation: Orientation::HigherIsId,
        }
    }

    fn validate(&self) -> Result<(), MetricError> {
        for (name, s) in [("ID", &self.id_scores), ("OOD", &self.ood_scores)] {
            if s.is_empty() {
                return Err(MetricError::Empty(name));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(MetricError::NonFinite(name));
            }
        }
        Ok(())
    }

    /// Scores flipped if needed so that higher is ID.
    fn oriented(&self) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
        self.validate()?;
        let sign = match self.orientation {
            Orientation::HigherIsId => 1.0,
            Orientation::LowerIsId => -1.0,
        };
        let flip = |s: &[f64]| s.iter().map(|v| sign * v).collect();
        Ok((flip(&self.id_scores), flip(&self.ood_scores)))
    }
}

/// Step-interpolated average precision. Tied scores enter together.
pub fn aupr_in(input: &EvalInput) -> Result<f64, MetricError> {
    let (id, ood) = input.oriented()?;
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, true)).chain(ood.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_id = id.len() as f64;
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut group_tp = 0;
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                group_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        if group_tp > 0 {
            ap += group_tp as f64 / n_id * tp as f64 / (tp + fp) as f64;
        }
        i = j;
    }
    Ok(ap)
}

/// Fraction of OOD scores at or above the largest threshold that keeps at
/// least 95% of ID scores.
pub fn fpr95(input: &EvalInput) -> Result<f64, MetricError> {
    let (mut id, ood) = input.oriented()?;
    id.sort_by(|a, b| b.total_cmp(a));
    let n = id.len();
    let k = (95 * n).div_ceil(100).max(1);
    let tau = id[k - 1];
    Ok(ood.iter().filter(|&&s| s >= tau).count() as f64 / ood.len() as f64)
}

/// Lowest-index argmax of each row.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>, MetricError> {
    logits.dims2().map_err(|e| MetricError::Shape(e.to_string()))?;
    Ok(logits
        .rows()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

pub fn id_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64, MetricError> {
    let pred = argmax_rows(logits)?;
    if pred.len() != labels.len() {
        return Err(MetricError::Shape(format!("{} rows for {} labels", pred.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(MetricError::Empty("ID"));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
