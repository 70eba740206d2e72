//! The unlabeled test pool.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::measures::PredictionSource;

/// Scores are clamped to `[SCORE_FLOOR, 1 - SCORE_FLOOR]` (then renormalized)
/// so every class keeps prior support.
pub const SCORE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub id: String,
    /// Text shown to annotators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display: Option<String>,
    /// Per-class scores `s(y|x)`, normalized.
    pub scores: Vec<f64>,
    /// Soft-classifier score used for thresholding (PR curves, stratification).
    pub raw_score: f64,
    /// Ground truth, present in experiment mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestPool {
    n_classes: usize,
    items: Vec<PoolItem>,
    /// Nonuniform marginal `p(x)`; `None` means `1/M`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    marginal: Option<Vec<f64>>,
}

impl TestPool {
    pub fn new(n_classes: usize, items: Vec<PoolItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidPool("pool has no items".into()));
        }
        if n_classes < 2 {
            return Err(Error::InvalidPool(format!(
                "label space needs at least 2 classes, got {n_classes}"
            )));
        }
        let mut seen = BTreeSet::new();
        for (i, item) in items.iter().enumerate() {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::InvalidPool(format!("duplicate item id `{}`", item.id)));
            }
            if item.scores.len() != n_classes {
                return Err(Error::InvalidPool(format!(
                    "item {i} has {} scores, expected {n_classes}",
                    item.scores.len()
                )));
            }
            let sum: f64 = item.scores.iter().sum();
            if math::abs(sum - 1.0) > 1e-9 || item.scores.iter().any(|s| !(*s >= 0.0)) {
                return Err(Error::InvalidPool(format!(
                    "scores of item `{}` do not form a distribution (sum {sum})",
                    item.id
                )));
            }
            if let Some(y) = item.true_label {
                if y >= n_classes {
                    return Err(Error::LabelOutOfRange {
                        label: y,
                        classes: n_classes,
                    });
                }
            }
            if !item.raw_score.is_finite() {
                return Err(Error::InvalidPool(format!("item `{}` has non-finite raw score", item.id)));
            }
        }
        Ok(Self {
            n_classes,
            items,
            marginal: None,
        })
    }

    /// Replaces the uniform marginal with explicit (normalized) weights.
    pub fn with_marginal(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.items.len() {
            return Err(Error::InvalidPool("marginal has wrong length".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidPool("marginal weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        self.marginal = Some(weights.into_iter().map(|w| w / total).collect());
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &PoolItem {
        &self.items[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|it| it.id == id)
    }

    /// `p(x_i)`.
    #[inline]
    pub fn marginal(&self, i: usize) -> f64 {
        match &self.marginal {
            Some(m) => m[i],
            None => 1.0 / self.items.len() as f64,
        }
    }

    pub fn marginal_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.marginal(i)).collect()
    }

    pub fn has_uniform_marginal(&self) -> bool {
        self.marginal.is_none()
    }

    pub fn raw_scores(&self) -> Vec<f64> {
        self.items.iter().map(|it| it.raw_score).collect()
    }

    /// True labels for every item, or the id of the first unlabeled item.
    pub fn true_labels(&self) -> Result<Vec<usize>> {
        self.items
            .iter()
            .map(|it| it.true_label.ok_or_else(|| Error::MissingLabel(it.id.clone())))
            .collect()
    }

    pub fn predictions(&self) -> PredictionSource {
        let mut scores = Vec::with_capacity(self.len() * self.n_classes);
        for it in &self.items {
            scores.extend_from_slice(&it.scores);
        }
        PredictionSource::from_scores(self.n_classes, scores, self.raw_scores())
            .expect("pool invariants guarantee valid predictions")
    }
}

/// Normalizes one row of classifier outputs into a distribution.
///
/// Rows that already form a distribution are kept; anything else goes
/// through a softmax. The result is floored at [`SCORE_FLOOR`].
pub fn normalize_scores(row: &[f64], force_softmax: bool) -> Vec<f64> {
    let sum: f64 = row.iter().sum();
    let probabilistic = row.iter().all(|s| (0.0..=1.0).contains(s)) && math::abs(sum - 1.0) <= 1e-6;
    let mut out: Vec<f64> = if probabilistic && !force_softmax {
        row.iter().map(|s| s / sum).collect()
    } else {
        softmax(row)
    };
    floor_distribution(&mut out);
    out
}

/// Binary pools with a single score column: `s(1|x)` is the score itself
/// when it lies in `[0, 1]`, otherwise the logistic (two-class softmax) of it.
pub fn binary_scores(score: f64, force_softmax: bool) -> Vec<f64> {
    let p1 = if (0.0..=1.0).contains(&score) && !force_softmax {
        score
    } else {
        1.0 / (1.0 + math::exp(-score))
    };
    let mut out = alloc::vec![1.0 - p1, p1];
    floor_distribution(&mut out);
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|s| math::exp(s - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn floor_distribution(p: &mut [f64]) {
    for v in p.iter_mut() {
        *v = v.clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR);
    }
    let total: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn item(id: &str, p1: f64, label: Option<usize>) -> PoolItem {
        PoolItem {
            id: id.to_string(),
            display: None,
            scores: vec![1.0 - p1, p1],
            raw_score: p1,
            true_label: label,
        }
    }

    #[test]
    fn rejects_duplicate_ids() {
        let err = TestPool::new(2, vec![item("a", 0.2, None), item("a", 0.3, None)]).unwrap_err();
        assert!(matches!(err, Error::InvalidPool(_)));
    }

    #[test]
    fn rejects_bad_score_rows() {
        let mut bad = item("a", 0.2, None);
        bad.scores = vec![0.5, 0.6];
        assert!(TestPool::new(2, vec![bad]).is_err());
    }

    #[test]
    fn softmax_applied_to_non_probabilistic_rows() {
        let s = normalize_scores(&[2.0, -1.0, 0.5], false);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s[0] > s[2] && s[2] > s[1]);
        let kept = normalize_scores(&[0.25, 0.75], false);
        assert!((kept[1] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn one_hot_scores_are_floored() {
        let s = binary_scores(1.0, false);
        assert!(s[0] > 0.0 && s[0] < 1e-5);
        assert!((s[0] + s[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn missing_labels_named() {
        let pool = TestPool::new(2, vec![item("a", 0.2, Some(0)), item("b", 0.7, None)]).unwrap();
        assert_eq!(pool.true_labels().unwrap_err(), Error::MissingLabel("b".into()));
    }
}
