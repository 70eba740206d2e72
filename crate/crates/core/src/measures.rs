//! Generalized performance measures `G = g(R)` with `R = E[ℓ(X, Y)]`.
//!
//! A [`Measure`] bundles a vector loss `ℓ`, a mapping `g` and its Jacobian
//! `Dg`. Built-in constructors cover the usual binary classification and
//! regression measures plus precision-recall curves; all built-in Jacobians
//! are analytic. User-defined measures implement [`CustomMeasure`] and get a
//! central-difference Jacobian.
//!
//! Ratio measures are undefined where a denominator vanishes. [`Measure::map`]
//! reports that per coordinate as `None` instead of substituting a value.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix};

/// Classifier outputs for every pool item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSource {
    n_classes: usize,
    /// `f(x)`: predicted label (classification) or predicted response.
    predicted: Vec<f64>,
    /// `s(y|x)`, row-major `M × C`.
    scores: Vec<f64>,
    raw_score: Vec<f64>,
}

impl PredictionSource {
    /// Predictions from normalized scores; `f(x)` is the arg-max class
    /// (ties resolve to the higher class).
    pub fn from_scores(n_classes: usize, scores: Vec<f64>, raw_score: Vec<f64>) -> Result<Self> {
        if n_classes == 0 || scores.len() != raw_score.len() * n_classes {
            return Err(Error::InvalidPool("score matrix shape mismatch".into()));
        }
        let mut predicted = Vec::with_capacity(raw_score.len());
        for (i, row) in scores.chunks(n_classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if math::abs(sum - 1.0) > 1e-9 {
                return Err(Error::InvalidPool(format!("scores of item {i} sum to {sum}")));
            }
            let mut best = 0;
            for (y, s) in row.iter().enumerate() {
                if *s >= row[best] {
                    best = y;
                }
            }
            predicted.push(best as f64);
        }
        Ok(Self {
            n_classes,
            predicted,
            scores,
            raw_score,
        })
    }

    /// Overrides `f(x)` (e.g. a thresholded or regression prediction).
    pub fn with_predicted(mut self, predicted: Vec<f64>) -> Result<Self> {
        if predicted.len() != self.raw_score.len() {
            return Err(Error::InvalidPool("prediction vector has wrong length".into()));
        }
        self.predicted = predicted;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.raw_score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_score.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    #[inline]
    pub fn predicted(&self, item: usize) -> f64 {
        self.predicted[item]
    }

    #[inline]
    pub fn score(&self, label: usize, item: usize) -> f64 {
        self.scores[item * self.n_classes + label]
    }

    pub fn score_row(&self, item: usize) -> &[f64] {
        &self.scores[item * self.n_classes..(item + 1) * self.n_classes]
    }

    #[inline]
    pub fn raw_score(&self, item: usize) -> f64 {
        self.raw_score[item]
    }

    pub fn raw_scores(&self) -> &[f64] {
        &self.raw_score
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BinaryMeasure {
    Accuracy,
    BalancedAccuracy,
    Precision,
    Recall,
    FBeta { beta: f64 },
    Mcc,
    FowlkesMallows,
    Brier,
}

impl BinaryMeasure {
    pub fn name(&self) -> String {
        match self {
            Self::Accuracy => "accuracy".into(),
            Self::BalancedAccuracy => "balanced_accuracy".into(),
            Self::Precision => "precision".into(),
            Self::Recall => "recall".into(),
            Self::FBeta { beta } if *beta == 1.0 => "f1".into(),
            Self::FBeta { beta } => format!("f_beta({beta})"),
            Self::Mcc => "mcc".into(),
            Self::FowlkesMallows => "fowlkes_mallows".into(),
            Self::Brier => "brier".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionMeasure {
    Mae,
    Mse,
    R2,
}

/// Measure selection as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum MeasureSpec {
    Accuracy,
    BalancedAccuracy,
    Precision,
    Recall,
    F1,
    FBeta {
        beta: f64,
    },
    Mcc,
    FowlkesMallows,
    Brier,
    Mae,
    Mse,
    R2,
    /// PR curve on explicit thresholds, or on a uniform grid of `grid`
    /// points spanning the pool's raw scores.
    PrCurve {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        thresholds: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grid: Option<usize>,
    },
}

impl MeasureSpec {
    pub fn build(&self, predictions: Arc<PredictionSource>) -> Result<Measure> {
        use MeasureSpec as S;
        match self {
            S::Accuracy => make_binary_measure(BinaryMeasure::Accuracy, predictions),
            S::BalancedAccuracy => make_binary_measure(BinaryMeasure::BalancedAccuracy, predictions),
            S::Precision => make_binary_measure(BinaryMeasure::Precision, predictions),
            S::Recall => make_binary_measure(BinaryMeasure::Recall, predictions),
            S::F1 => make_binary_measure(BinaryMeasure::FBeta { beta: 1.0 }, predictions),
            S::FBeta { beta } => make_binary_measure(BinaryMeasure::FBeta { beta: *beta }, predictions),
            S::Mcc => make_binary_measure(BinaryMeasure::Mcc, predictions),
            S::FowlkesMallows => make_binary_measure(BinaryMeasure::FowlkesMallows, predictions),
            S::Brier => make_binary_measure(BinaryMeasure::Brier, predictions),
            S::Mae => make_regression_measure(RegressionMeasure::Mae, predictions, None),
            S::Mse => make_regression_measure(RegressionMeasure::Mse, predictions, None),
            S::R2 => make_regression_measure(RegressionMeasure::R2, predictions, None),
            S::PrCurve { thresholds, grid } => {
                let thresholds = match (thresholds, grid) {
                    (Some(t), None) => t.clone(),
                    (None, Some(l)) => uniform_threshold_grid(predictions.raw_scores(), *l)?,
                    _ => {
                        return Err(Error::InvalidMeasure(
                            "pr_curve needs exactly one of `thresholds` or `grid`".into(),
                        ))
                    }
                };
                make_pr_curve_measure(thresholds, predictions)
            }
        }
    }
}

/// `L` uniformly spaced thresholds from the minimum to the maximum score.
pub fn uniform_threshold_grid(scores: &[f64], points: usize) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if points < 2 {
        return Err(Error::InvalidMeasure("threshold grid needs at least 2 points".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::InvalidGrid { position: 1 });
    }
    let step = (hi - lo) / (points - 1) as f64;
    let mut grid: Vec<f64> = (0..points).map(|l| lo + step * l as f64).collect();
    grid[points - 1] = hi;
    Ok(grid)
}

/// A user-supplied generalized measure.
pub trait CustomMeasure: Send + Sync {
    fn name(&self) -> String;
    fn loss_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn loss_bound(&self) -> f64;
    fn loss(&self, item: usize, label: usize, out: &mut [f64]);
    fn map(&self, risk: &[f64]) -> Vec<Option<f64>>;
}

/// How a measure's Jacobian is obtained (recorded in run logs).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianSource {
    Analytic,
    FiniteDifference,
}

#[derive(Clone)]
enum Kind {
    Binary(BinaryMeasure),
    Regression {
        kind: RegressionMeasure,
        responses: Vec<f64>,
    },
    PrCurve {
        thresholds: Vec<f64>,
    },
    Custom(Arc<dyn CustomMeasure>),
}

/// A generalized measure `(ℓ, g, Dg)` bound to a set of predictions.
#[derive(Clone)]
pub struct Measure {
    kind: Kind,
    predictions: Arc<PredictionSource>,
    loss_dim: usize,
    out_dim: usize,
    loss_bound: f64,
}

impl fmt::Debug for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Measure")
            .field("name", &self.name())
            .field("loss_dim", &self.loss_dim)
            .field("out_dim", &self.out_dim)
            .finish()
    }
}

pub fn make_binary_measure(kind: BinaryMeasure, predictions: Arc<PredictionSource>) -> Result<Measure> {
    if predictions.n_classes() != 2 {
        return Err(Error::UnsupportedMeasure {
            measure: kind.name(),
            classes: predictions.n_classes(),
        });
    }
    if let BinaryMeasure::FBeta { beta } = kind {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidMeasure(format!("F-beta needs beta > 0, got {beta}")));
        }
    }
    let loss_dim = match kind {
        BinaryMeasure::Accuracy | BinaryMeasure::Brier => 1,
        BinaryMeasure::Precision | BinaryMeasure::Recall | BinaryMeasure::FBeta { .. } => 2,
        BinaryMeasure::BalancedAccuracy | BinaryMeasure::Mcc | BinaryMeasure::FowlkesMallows => 3,
    };
    let loss_bound = if kind == BinaryMeasure::Brier { 2.0 } else { 1.0 };
    Ok(Measure {
        kind: Kind::Binary(kind),
        predictions,
        loss_dim,
        out_dim: 1,
        loss_bound,
    })
}

/// Regression measures over a finite response set; label `y` maps to
/// `responses[y]` (defaults to the label index itself).
pub fn make_regression_measure(
    kind: RegressionMeasure,
    predictions: Arc<PredictionSource>,
    responses: Option<Vec<f64>>,
) -> Result<Measure> {
    let responses =
        responses.unwrap_or_else(|| (0..predictions.n_classes()).map(|y| y as f64).collect());
    if responses.len() != predictions.n_classes() || responses.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidMeasure(
            "response values must be finite, one per class".into(),
        ));
    }
    let max_y = responses.iter().fold(0.0_f64, |m, r| m.max(math::abs(*r)));
    let max_f = (0..predictions.len())
        .map(|i| math::abs(predictions.predicted(i)))
        .fold(0.0_f64, f64::max);
    let (loss_dim, loss_bound) = match kind {
        RegressionMeasure::Mae => (1, max_y + max_f),
        RegressionMeasure::Mse => (1, (max_y + max_f) * (max_y + max_f)),
        RegressionMeasure::R2 => (4, (max_y * max_y).max(max_f * max_f).max(max_y).max(max_f)),
    };
    Ok(Measure {
        kind: Kind::Regression { kind, responses },
        predictions,
        loss_dim,
        out_dim: 1,
        loss_bound: loss_bound.max(f64::MIN_POSITIVE),
    })
}

pub fn make_pr_curve_measure(thresholds: Vec<f64>, predictions: Arc<PredictionSource>) -> Result<Measure> {
    if predictions.n_classes() != 2 {
        return Err(Error::UnsupportedMeasure {
            measure: "pr_curve".into(),
            classes: predictions.n_classes(),
        });
    }
    if thresholds.is_empty() {
        return Err(Error::EmptyInput("thresholds"));
    }
    for l in 1..thresholds.len() {
        if !(thresholds[l] > thresholds[l - 1]) {
            return Err(Error::InvalidGrid { position: l });
        }
    }
    let l = thresholds.len();
    Ok(Measure {
        kind: Kind::PrCurve { thresholds },
        predictions,
        loss_dim: 2 * l + 1,
        out_dim: 2 * l,
        loss_bound: 1.0,
    })
}

pub fn make_custom_measure(custom: Arc<dyn CustomMeasure>, predictions: Arc<PredictionSource>) -> Measure {
    Measure {
        loss_dim: custom.loss_dim(),
        out_dim: custom.out_dim(),
        loss_bound: custom.loss_bound(),
        kind: Kind::Custom(custom),
        predictions,
    }
}

#[inline]
fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

impl Measure {
    pub fn name(&self) -> String {
        match &self.kind {
            Kind::Binary(b) => b.name(),
            Kind::Regression { kind, .. } => match kind {
                RegressionMeasure::Mae => "mae".into(),
                RegressionMeasure::Mse => "mse".into(),
                RegressionMeasure::R2 => "r2".into(),
            },
            Kind::PrCurve { thresholds } => format!("pr_curve(L={})", thresholds.len()),
            Kind::Custom(c) => c.name(),
        }
    }

    /// `d`
    pub fn loss_dim(&self) -> usize {
        self.loss_dim
    }

    /// `m`
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn loss_bound(&self) -> f64 {
        self.loss_bound
    }

    pub fn n_classes(&self) -> usize {
        self.predictions.n_classes()
    }

    pub fn n_items(&self) -> usize {
        self.predictions.len()
    }

    pub fn predictions(&self) -> &Arc<PredictionSource> {
        &self.predictions
    }

    pub fn thresholds(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::PrCurve { thresholds } => Some(thresholds),
            _ => None,
        }
    }

    /// `g(cR) = g(R)` for every `c > 0`.
    pub fn is_scale_invariant(&self) -> bool {
        match &self.kind {
            Kind::Binary(kind) => matches!(
                kind,
                BinaryMeasure::Precision | BinaryMeasure::Recall | BinaryMeasure::FBeta { .. } | BinaryMeasure::FowlkesMallows
            ),
            Kind::PrCurve { .. } => true,
            _ => false,
        }
    }

    pub fn jacobian_source(&self) -> JacobianSource {
        match self.kind {
            Kind::Custom(_) => JacobianSource::FiniteDifference,
            _ => JacobianSource::Analytic,
        }
    }

    /// Writes `ℓ(x_item, label)` into `out` (length `d`).
    pub fn loss_into(&self, item: usize, label: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.loss_dim);
        let p = &self.predictions;
        match &self.kind {
            Kind::Binary(kind) => {
                let f = p.predicted(item);
                let y = label as f64;
                match kind {
                    BinaryMeasure::Accuracy => out[0] = if label as f64 != f { 1.0 } else { 0.0 },
                    BinaryMeasure::Precision => {
                        out[0] = y * f;
                        out[1] = f;
                    }
                    BinaryMeasure::Recall => {
                        out[0] = y * f;
                        out[1] = y;
                    }
                    BinaryMeasure::FBeta { beta } => {
                        let b2 = beta * beta;
                        out[0] = y * f;
                        out[1] = (b2 * y + f) / (1.0 + b2);
                    }
                    BinaryMeasure::BalancedAccuracy | BinaryMeasure::Mcc | BinaryMeasure::FowlkesMallows => {
                        out[0] = y * f;
                        out[1] = y;
                        out[2] = f;
                    }
                    BinaryMeasure::Brier => {
                        let d = p.score(1, item) - y;
                        out[0] = 2.0 * d * d;
                    }
                }
            }
            Kind::Regression { kind, responses } => {
                let f = p.predicted(item);
                let y = responses[label];
                match kind {
                    RegressionMeasure::Mae => out[0] = math::abs(y - f),
                    RegressionMeasure::Mse => out[0] = (y - f) * (y - f),
                    RegressionMeasure::R2 => {
                        out[0] = y;
                        out[1] = y * y;
                        out[2] = f;
                        out[3] = f * f;
                    }
                }
            }
            Kind::PrCurve { thresholds } => {
                let s = p.raw_score(item);
                let y = label as f64;
                let l = thresholds.len();
                for (j, tau) in thresholds.iter().enumerate() {
                    let above = if s >= *tau { 1.0 } else { 0.0 };
                    out[j] = above;
                    out[l + j] = y * above;
                }
                out[2 * l] = y;
            }
            Kind::Custom(c) => c.loss(item, label, out),
        }
    }

    pub fn loss(&self, item: usize, label: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.loss_dim];
        self.loss_into(item, label, &mut out);
        out
    }

    /// `g(R)`; coordinates with a vanishing denominator are `None`.
    pub fn map(&self, r: &[f64]) -> Vec<Option<f64>> {
        debug_assert_eq!(r.len(), self.loss_dim);
        match &self.kind {
            Kind::Binary(kind) => vec![match kind {
                BinaryMeasure::Accuracy => Some(1.0 - r[0]),
                BinaryMeasure::Brier => Some(r[0]),
                BinaryMeasure::Precision | BinaryMeasure::Recall | BinaryMeasure::FBeta { .. } => {
                    ratio(r[0], r[1])
                }
                BinaryMeasure::BalancedAccuracy => {
                    ratio(r[0] + r[1] * (1.0 - r[1] - r[2]), 2.0 * r[1] * (1.0 - r[1]))
                }
                BinaryMeasure::Mcc => {
                    let s = r[1] * r[2] * (1.0 - r[1]) * (1.0 - r[2]);
                    (s > 0.0).then(|| (r[0] - r[1] * r[2]) / math::sqrt(s))
                }
                BinaryMeasure::FowlkesMallows => {
                    let s = r[1] * r[2];
                    (s > 0.0).then(|| r[0] / math::sqrt(s))
                }
            }],
            Kind::Regression { kind, .. } => vec![match kind {
                RegressionMeasure::Mae | RegressionMeasure::Mse => Some(r[0]),
                RegressionMeasure::R2 => {
                    let den = r[1] - r[0] * r[0];
                    (den > 0.0).then(|| (r[3] - 2.0 * r[0] * r[2] + r[0] * r[0]) / den)
                }
            }],
            Kind::PrCurve { thresholds } => {
                let l = thresholds.len();
                let mut out = Vec::with_capacity(2 * l);
                for j in 0..l {
                    out.push(ratio(r[l + j], r[j]));
                }
                for j in 0..l {
                    out.push(ratio(r[l + j], r[2 * l]));
                }
                out
            }
            Kind::Custom(c) => c.map(r),
        }
    }

    /// `g(R)` when every coordinate is defined.
    pub fn map_defined(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.map(r).into_iter().collect::<Option<Vec<f64>>>().ok_or(Error::UndefinedMeasure)
    }

    /// `Dg(R)`, an `m × d` matrix with entries `∂g_i/∂R_j`.
    pub fn jacobian(&self, r: &[f64]) -> Result<Matrix> {
        let d = self.loss_dim;
        let mut jac = Matrix::zeros(self.out_dim, d);
        match &self.kind {
            Kind::Binary(kind) => match kind {
                BinaryMeasure::Accuracy => jac.set(0, 0, -1.0),
                BinaryMeasure::Brier => jac.set(0, 0, 1.0),
                BinaryMeasure::Precision | BinaryMeasure::Recall | BinaryMeasure::FBeta { .. } => {
                    if r[1] == 0.0 {
                        return Err(Error::UndefinedMeasure);
                    }
                    jac.set(0, 0, 1.0 / r[1]);
                    jac.set(0, 1, -r[0] / (r[1] * r[1]));
                }
                BinaryMeasure::BalancedAccuracy => {
                    let num = r[0] + r[1] * (1.0 - r[1] - r[2]);
                    let den = 2.0 * r[1] * (1.0 - r[1]);
                    if den == 0.0 {
                        return Err(Error::UndefinedMeasure);
                    }
                    let dnum = 1.0 - 2.0 * r[1] - r[2];
                    let dden = 2.0 - 4.0 * r[1];
                    jac.set(0, 0, 1.0 / den);
                    jac.set(0, 1, (dnum * den - num * dden) / (den * den));
                    jac.set(0, 2, -r[1] / den);
                }
                BinaryMeasure::Mcc => {
                    let s = r[1] * r[2] * (1.0 - r[1]) * (1.0 - r[2]);
                    if !(s > 0.0) {
                        return Err(Error::UndefinedMeasure);
                    }
                    let root = math::sqrt(s);
                    let num = r[0] - r[1] * r[2];
                    let ds2 = r[2] * (1.0 - r[2]) * (1.0 - 2.0 * r[1]);
                    let ds3 = r[1] * (1.0 - r[1]) * (1.0 - 2.0 * r[2]);
                    jac.set(0, 0, 1.0 / root);
                    jac.set(0, 1, -r[2] / root - num * ds2 / (2.0 * s * root));
                    jac.set(0, 2, -r[1] / root - num * ds3 / (2.0 * s * root));
                }
                BinaryMeasure::FowlkesMallows => {
                    let s = r[1] * r[2];
                    if !(s > 0.0) {
                        return Err(Error::UndefinedMeasure);
                    }
                    let root = math::sqrt(s);
                    jac.set(0, 0, 1.0 / root);
                    jac.set(0, 1, -r[0] / (2.0 * r[1] * root));
                    jac.set(0, 2, -r[0] / (2.0 * r[2] * root));
                }
            },
            Kind::Regression { kind, .. } => match kind {
                RegressionMeasure::Mae | RegressionMeasure::Mse => jac.set(0, 0, 1.0),
                RegressionMeasure::R2 => {
                    let den = r[1] - r[0] * r[0];
                    if !(den > 0.0) {
                        return Err(Error::UndefinedMeasure);
                    }
                    let num = r[3] - 2.0 * r[0] * r[2] + r[0] * r[0];
                    let dnum0 = -2.0 * r[2] + 2.0 * r[0];
                    let dden0 = -2.0 * r[0];
                    jac.set(0, 0, (dnum0 * den - num * dden0) / (den * den));
                    jac.set(0, 1, -num / (den * den));
                    jac.set(0, 2, -2.0 * r[0] / den);
                    jac.set(0, 3, 1.0 / den);
                }
            },
            Kind::PrCurve { thresholds } => {
                let l = thresholds.len();
                let pos = r[2 * l];
                for j in 0..l {
                    let pred = r[j];
                    if pred == 0.0 || pos == 0.0 {
                        return Err(Error::UndefinedMeasure);
                    }
                    // precision_j = R_{L+j} / R_j
                    jac.set(j, j, -r[l + j] / (pred * pred));
                    jac.set(j, l + j, 1.0 / pred);
                    // recall_j = R_{L+j} / R_{2L+1}
                    jac.set(l + j, l + j, 1.0 / pos);
                    jac.set(l + j, 2 * l, -r[l + j] / (pos * pos));
                }
            }
            Kind::Custom(_) => return self.finite_difference_jacobian(r),
        }
        Ok(jac)
    }

    /// Central differences with step `1e-5 · max(|R_j|, 1)`.
    pub fn finite_difference_jacobian(&self, r: &[f64]) -> Result<Matrix> {
        let d = self.loss_dim;
        let mut jac = Matrix::zeros(self.out_dim, d);
        let mut probe = r.to_vec();
        for j in 0..d {
            let h = 1e-5 * math::abs(r[j]).max(1.0);
            probe[j] = r[j] + h;
            let up = self.map_defined(&probe)?;
            probe[j] = r[j] - h;
            let down = self.map_defined(&probe)?;
            probe[j] = r[j];
            for i in 0..self.out_dim {
                jac.set(i, j, (up[i] - down[i]) / (2.0 * h));
            }
        }
        Ok(jac)
    }
}

/// `R` for a weighted item-label collection: the weight-normalized mean loss.
pub fn eval_risk(measure: &Measure, records: &[(usize, usize, f64)]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("records"));
    }
    let d = measure.loss_dim();
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    let mut total = 0.0;
    for (index, &(item, label, weight)) in records.iter().enumerate() {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::InvalidWeight { index, weight });
        }
        measure.loss_into(item, label, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += weight * b;
        }
        total += weight;
    }
    if !(total > 0.0) {
        return Err(Error::EmptyInput("records with positive weight"));
    }
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// Exact pool risk `R = Σ_i p(x_i) ℓ(x_i, y_i)` under known labels.
pub fn pool_risk(measure: &Measure, labels: &[usize], marginal: &[f64]) -> Vec<f64> {
    let d = measure.loss_dim();
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for (i, (&y, &p)) in labels.iter().zip(marginal).enumerate() {
        measure.loss_into(i, y, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += p * b;
        }
    }
    acc
}

/// Exact `(R, G)` under known labels. `g` of a ratio measure is invariant
/// to rescaling `R`, so on a uniform marginal it is evaluated on the raw
/// loss sums: count-based measures then equal direct counting bit for bit.
pub fn pool_measure(measure: &Measure, labels: &[usize], marginal: &[f64]) -> (Vec<f64>, Vec<Option<f64>>) {
    let r = pool_risk(measure, labels, marginal);
    let uniform = marginal.windows(2).all(|w| w[0] == w[1]);
    let g = if uniform && measure.is_scale_invariant() {
        let ones = vec![1.0; labels.len()];
        measure.map(&pool_risk(measure, labels, &ones))
    } else {
        measure.map(&r)
    };
    (r, g)
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(preds: &[(f64, f64)]) -> Arc<PredictionSource> {
        // (s(1|x), raw score)
        let mut scores = Vec::new();
        let mut raw = Vec::new();
        for &(p1, r) in preds {
            scores.push(1.0 - p1);
            scores.push(p1);
            raw.push(r);
        }
        Arc::new(PredictionSource::from_scores(2, scores, raw).unwrap())
    }

    #[test]
    fn accuracy_row() {
        let p = binary(&[(0.9, 0.9)]);
        let m = make_binary_measure(BinaryMeasure::Accuracy, p).unwrap();
        assert_eq!(m.loss(0, 0), vec![1.0]);
        assert_eq!(m.map(&[0.2]), vec![Some(0.8)]);
    }

    #[test]
    fn f1_row() {
        let p = binary(&[(0.1, 0.1)]);
        let m = make_binary_measure(BinaryMeasure::FBeta { beta: 1.0 }, p).unwrap();
        assert_eq!(m.loss(0, 1), vec![0.0, 0.5]);
    }

    #[test]
    fn mcc_zero_numerator() {
        let p = binary(&[(0.1, 0.1)]);
        let m = make_binary_measure(BinaryMeasure::Mcc, p).unwrap();
        assert_eq!(m.map(&[0.25, 0.5, 0.5]), vec![Some(0.0)]);
    }

    #[test]
    fn non_binary_rejected() {
        let p = Arc::new(
            PredictionSource::from_scores(3, vec![0.2, 0.3, 0.5], vec![0.5]).unwrap(),
        );
        assert!(matches!(
            make_binary_measure(BinaryMeasure::Recall, p.clone()),
            Err(Error::UnsupportedMeasure { classes: 3, .. })
        ));
        assert!(make_pr_curve_measure(vec![0.5], p).is_err());
    }

    #[test]
    fn bad_beta_rejected() {
        let p = binary(&[(0.1, 0.1)]);
        assert!(make_binary_measure(BinaryMeasure::FBeta { beta: 0.0 }, p).is_err());
    }

    #[test]
    fn regression_rows() {
        let p = Arc::new(
            PredictionSource::from_scores(6, vec![1.0 / 6.0; 6], vec![0.0])
                .unwrap()
                .with_predicted(vec![5.0])
                .unwrap(),
        );
        let mae = make_regression_measure(RegressionMeasure::Mae, p.clone(), None).unwrap();
        assert_eq!(mae.loss(0, 3), vec![2.0]);
        let mse = make_regression_measure(RegressionMeasure::Mse, p.clone(), None).unwrap();
        assert_eq!(mse.loss(0, 5), vec![0.0]);
        let r2 = make_regression_measure(RegressionMeasure::R2, p, None).unwrap();
        assert_eq!(r2.map(&[0.0, 1.0, 0.0, 1.0]), vec![Some(1.0)]);
        assert_eq!(r2.loss(0, 2), vec![2.0, 4.0, 5.0, 25.0]);
    }

    #[test]
    fn pr_curve_rows() {
        let p = binary(&[(0.7, 0.7)]);
        let m = make_pr_curve_measure(vec![0.5], p.clone()).unwrap();
        assert_eq!(m.loss(0, 1), vec![1.0, 1.0, 1.0]);
        assert_eq!(m.map(&[0.5, 0.25, 0.5]), vec![Some(0.5), Some(0.5)]);
        assert_eq!(m.out_dim(), 2);
        assert!(matches!(
            make_pr_curve_measure(vec![0.5, 0.5], p),
            Err(Error::InvalidGrid { position: 1 })
        ));
    }

    #[test]
    fn zero_denominator_flagged() {
        let p = binary(&[(0.7, 0.7)]);
        let m = make_binary_measure(BinaryMeasure::Recall, p).unwrap();
        assert_eq!(m.map(&[0.0, 0.0]), vec![None]);
        assert_eq!(m.jacobian(&[0.0, 0.0]).unwrap_err(), Error::UndefinedMeasure);
    }

    #[test]
    fn eval_risk_weighted_mean() {
        let p = binary(&[(0.9, 0.9), (0.9, 0.9)]);
        let m = make_binary_measure(BinaryMeasure::Accuracy, p).unwrap();
        // item 0 with label 1 is correct (ℓ = 0), item 1 with label 0 is wrong (ℓ = 1)
        assert_eq!(eval_risk(&m, &[(0, 1, 1.0)]).unwrap(), vec![0.0]);
        assert_eq!(eval_risk(&m, &[(0, 1, 1.0), (1, 0, 3.0)]).unwrap(), vec![0.75]);
        assert_eq!(eval_risk(&m, &[]).unwrap_err(), Error::EmptyInput("records"));
        assert!(matches!(
            eval_risk(&m, &[(0, 1, -1.0)]),
            Err(Error::InvalidWeight { index: 0, .. })
        ));
    }

    #[test]
    fn uniform_grid_spans_scores() {
        let g = uniform_threshold_grid(&[0.2, 0.9, 0.5], 8).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], 0.2);
        assert_eq!(g[7], 0.9);
    }

    struct Doubled;
    impl CustomMeasure for Doubled {
        fn name(&self) -> String {
            "doubled_error".to_string()
        }
        fn loss_dim(&self) -> usize {
            1
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn loss_bound(&self) -> f64 {
            1.0
        }
        fn loss(&self, _item: usize, label: usize, out: &mut [f64]) {
            out[0] = label as f64;
        }
        fn map(&self, r: &[f64]) -> Vec<Option<f64>> {
            vec![Some(r[0] * r[0])]
        }
    }

    #[test]
    fn custom_measure_uses_finite_differences() {
        let m = make_custom_measure(Arc::new(Doubled), binary(&[(0.5, 0.5)]));
        assert_eq!(m.jacobian_source(), JacobianSource::FiniteDifference);
        let j = m.jacobian(&[0.3]).unwrap();
        assert!((j.get(0, 0) - 0.6).abs() < 1e-8);
    }
}
