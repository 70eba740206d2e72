//! Proposal distributions over the pool.
//!
//! A proposal is an explicit probability vector over items. The label is
//! never biased: sampling `x ~ q` and asking the oracle for `y ~ p(y|x)`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::measures::Measure;

/// Loss vectors `ℓ(x, y)` for every item-label pair, stored once per
/// distinct vector. Most measures take only a handful of distinct values
/// (they depend on `x` through the prediction alone), so per-stage norm
/// computations run over the unique vectors rather than the pool.
#[derive(Clone, Debug)]
pub struct LossTable {
    n_items: usize,
    n_classes: usize,
    dim: usize,
    index: Vec<u32>,
    vectors: Vec<f64>,
    nonzero: Vec<bool>,
}

impl LossTable {
    pub fn new(measure: &Measure) -> Self {
        let n_items = measure.n_items();
        let n_classes = measure.n_classes();
        let dim = measure.loss_dim();
        let mut lookup: BTreeMap<Vec<u64>, u32> = BTreeMap::new();
        let mut index = Vec::with_capacity(n_items * n_classes);
        let mut vectors = Vec::new();
        let mut nonzero = Vec::new();
        let mut buf = vec![0.0; dim];
        for i in 0..n_items {
            for y in 0..n_classes {
                measure.loss_into(i, y, &mut buf);
                // +0.0 and -0.0 share a key
                let key: Vec<u64> = buf.iter().map(|v| (v + 0.0).to_bits()).collect();
                let next = nonzero.len() as u32;
                let u = *lookup.entry(key).or_insert_with(|| {
                    vectors.extend_from_slice(&buf);
                    nonzero.push(buf.iter().any(|v| *v != 0.0));
                    next
                });
                index.push(u);
            }
        }
        Self {
            n_items,
            n_classes,
            dim,
            index,
            vectors,
            nonzero,
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_unique(&self) -> usize {
        self.nonzero.len()
    }

    #[inline]
    pub fn unique_index(&self, item: usize, label: usize) -> usize {
        self.index[item * self.n_classes + label] as usize
    }

    #[inline]
    pub fn loss(&self, item: usize, label: usize) -> &[f64] {
        self.vector(self.unique_index(item, label))
    }

    #[inline]
    pub fn vector(&self, u: usize) -> &[f64] {
        &self.vectors[u * self.dim..(u + 1) * self.dim]
    }

    #[inline]
    pub fn is_nonzero(&self, u: usize) -> bool {
        self.nonzero[u]
    }

    /// `‖J ℓ_u‖₂` for every distinct loss vector.
    pub fn weighted_norms(&self, jac: &Matrix) -> Vec<f64> {
        (0..self.n_unique())
            .map(|u| {
                let v = jac.mul_vec(self.vector(u));
                math::sqrt(v.iter().map(|x| x * x).sum())
            })
            .collect()
    }
}

/// A label distribution `π(y|x)` for every item.
#[derive(Clone, Copy, Debug)]
pub enum LabelDist<'a> {
    /// Deterministic labels.
    Labels(&'a [usize]),
    /// Row-major `M × C`.
    PerItem(&'a [f64]),
    /// Per-block rows (`K × C`) with point masses for observed items.
    Blocked {
        block_of: &'a [usize],
        probs: &'a [f64],
        observed: &'a [Option<usize>],
    },
}

impl LabelDist<'_> {
    /// Calls `f(y, π(y|x_i))` for every label with positive probability.
    #[inline]
    pub fn for_each(&self, item: usize, n_classes: usize, mut f: impl FnMut(usize, f64)) {
        let row = match *self {
            LabelDist::Labels(labels) => return f(labels[item], 1.0),
            LabelDist::PerItem(probs) => &probs[item * n_classes..(item + 1) * n_classes],
            LabelDist::Blocked {
                block_of,
                probs,
                observed,
            } => {
                if let Some(Some(y)) = observed.get(item) {
                    return f(*y, 1.0);
                }
                let k = block_of[item];
                &probs[k * n_classes..(k + 1) * n_classes]
            }
        };
        for (y, &p) in row.iter().enumerate() {
            if p > 0.0 {
                f(y, p);
            }
        }
    }

    /// `Σ_y π(y|x_i) f(y)`.
    #[inline]
    pub fn expect(&self, item: usize, n_classes: usize, mut f: impl FnMut(usize) -> f64) -> f64 {
        let mut acc = 0.0;
        self.for_each(item, n_classes, |y, p| acc += p * f(y));
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub probs: Vec<f64>,
    pub stage: usize,
    pub epsilon: f64,
    pub mixing: f64,
}

impl Proposal {
    /// Normalizes `weights`; an all-zero vector is a degenerate proposal.
    pub fn from_weights(weights: Vec<f64>, stage: usize, epsilon: f64) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateProposal);
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
            stage,
            epsilon,
            mixing: 0.0,
        })
    }

    /// The pool marginal itself (passive sampling).
    pub fn marginal(marginal: &[f64]) -> Self {
        Self {
            probs: marginal.to_vec(),
            stage: 0,
            epsilon: 0.0,
            mixing: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    #[inline]
    pub fn prob(&self, item: usize) -> f64 {
        self.probs[item]
    }

    pub fn support_mask(&self) -> Vec<bool> {
        self.probs.iter().map(|p| *p > 0.0).collect()
    }
}

/// Plug-in risk `Σ_i p(x_i) Σ_y π(y|x_i) ℓ(x_i, y)`.
pub fn plugin_risk(table: &LossTable, marginal: &[f64], dist: LabelDist<'_>) -> Vec<f64> {
    let c = table.n_classes();
    let mut r = vec![0.0; table.dim()];
    // accumulate mass per distinct loss vector, then expand once
    let mut mass = vec![0.0; table.n_unique()];
    for (i, &p) in marginal.iter().enumerate() {
        dist.for_each(i, c, |y, w| mass[table.unique_index(i, y)] += p * w);
    }
    for (u, &m) in mass.iter().enumerate() {
        if m != 0.0 {
            for (a, b) in r.iter_mut().zip(table.vector(u)) {
                *a += m * b;
            }
        }
    }
    r
}

/// `q*(x) ∝ p(x) √(Σ_y ‖Dg(R) ℓ(x, y)‖² p(y|x))`.
pub fn optimal_proposal(
    measure: &Measure,
    table: &LossTable,
    marginal: &[f64],
    truth: LabelDist<'_>,
    r: &[f64],
) -> Result<Proposal> {
    let jac = measure.jacobian(r)?;
    let norms = table.weighted_norms(&jac);
    let c = table.n_classes();
    let weights: Vec<f64> = marginal
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let s = truth.expect(i, c, |y| {
                let n = norms[table.unique_index(i, y)];
                n * n
            });
            p * math::sqrt(s)
        })
        .collect();
    Proposal::from_weights(weights, 0, 0.0).map_err(|_| Error::DegenerateMeasure)
}

/// Deterministic-oracle proposal:
/// `q(x) ∝ p(x) Σ_y max{‖Dg(R̂) ℓ(x,y)‖, ε·1{ℓ(x,y) ≠ 0}} π(y|x)`.
pub fn adapted_proposal_det(
    measure: &Measure,
    table: &LossTable,
    marginal: &[f64],
    posteriors: LabelDist<'_>,
    r_hat: &[f64],
    epsilon: f64,
    stage: usize,
) -> Result<Proposal> {
    let jac = measure.jacobian(r_hat)?;
    let norms = table.weighted_norms(&jac);
    let floored: Vec<f64> = norms
        .iter()
        .enumerate()
        .map(|(u, &n)| if table.is_nonzero(u) { n.max(epsilon) } else { n })
        .collect();
    let c = table.n_classes();
    let weights: Vec<f64> = marginal
        .iter()
        .enumerate()
        .map(|(i, &p)| p * posteriors.expect(i, c, |y| floored[table.unique_index(i, y)]))
        .collect();
    Proposal::from_weights(weights, stage, epsilon)
}

/// Stochastic-oracle proposal:
/// `q(x) ∝ p(x) [Σ_y max{‖Dg(R̂) ℓ(x,y)‖², ε·1{ℓ(x,y) ≠ 0}} p̂(y|x)]^{1/2}`.
pub fn adapted_proposal_stoch(
    measure: &Measure,
    table: &LossTable,
    marginal: &[f64],
    predictive: LabelDist<'_>,
    r_hat: &[f64],
    epsilon: f64,
    stage: usize,
) -> Result<Proposal> {
    let jac = measure.jacobian(r_hat)?;
    let norms = table.weighted_norms(&jac);
    let floored: Vec<f64> = norms
        .iter()
        .enumerate()
        .map(|(u, &n)| if table.is_nonzero(u) { (n * n).max(epsilon) } else { n * n })
        .collect();
    let c = table.n_classes();
    let weights: Vec<f64> = marginal
        .iter()
        .enumerate()
        .map(|(i, &p)| p * math::sqrt(predictive.expect(i, c, |y| floored[table.unique_index(i, y)])))
        .collect();
    Proposal::from_weights(weights, stage, epsilon)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonSchedule {
    /// `ε₀ (1 − fraction observed)`.
    DetFractionUnobserved,
    /// `ε₀ / (t + 1)`.
    StochInverseT,
}

impl EpsilonSchedule {
    pub fn value(self, epsilon0: f64, fraction_observed: f64, stage: usize) -> f64 {
        match self {
            EpsilonSchedule::DetFractionUnobserved => epsilon0 * (1.0 - fraction_observed).max(0.0),
            EpsilonSchedule::StochInverseT => epsilon0 / (stage as f64 + 1.0),
        }
    }
}

/// `(1 − δ) q + δ p`.
pub fn mix_with_marginal(q: &Proposal, delta: f64, marginal: &[f64]) -> Result<Proposal> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(alloc::format!("mixing weight {delta} outside [0, 1]")));
    }
    if delta == 0.0 {
        return Ok(q.clone());
    }
    Ok(Proposal {
        probs: q.probs.iter().zip(marginal).map(|(a, p)| (1.0 - delta) * a + delta * p).collect(),
        stage: q.stage,
        epsilon: q.epsilon,
        mixing: delta,
    })
}

/// `KL(q* ‖ q) = Σ q* log(q*/q)`; `+∞` when `q` misses part of `q*`'s
/// support.
pub fn kl_to_optimal(q: &Proposal, q_star: &Proposal) -> f64 {
    let mut kl = 0.0;
    for (&a, &b) in q_star.probs.iter().zip(&q.probs) {
        if a > 0.0 {
            if !(b > 0.0) {
                return f64::INFINITY;
            }
            kl += a * math::ln(a / b);
        }
    }
    kl.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{make_binary_measure, BinaryMeasure, PredictionSource};
    use alloc::sync::Arc;

    fn preds(pred: &[f64]) -> Arc<PredictionSource> {
        let scores = pred.iter().flat_map(|&f| [1.0 - f, f]).collect();
        Arc::new(PredictionSource::from_scores(2, scores, pred.to_vec()).unwrap())
    }

    fn uniform(m: usize) -> Vec<f64> {
        vec![1.0 / m as f64; m]
    }

    #[test]
    fn optimal_accuracy_puts_mass_on_errors() {
        let m = make_binary_measure(BinaryMeasure::Accuracy, preds(&[1.0, 0.0])).unwrap();
        let t = LossTable::new(&m);
        let labels = [1usize, 1];
        let r = [0.5];
        let q = optimal_proposal(&m, &t, &uniform(2), LabelDist::Labels(&labels), &r).unwrap();
        assert_eq!(q.probs, vec![0.0, 1.0]);
    }

    #[test]
    fn optimal_recall_matches_direct_evaluation() {
        let f = [1.0, 0.0, 1.0, 0.0, 1.0];
        let y = [1usize, 1, 0, 0, 1];
        let m = make_binary_measure(BinaryMeasure::Recall, preds(&f)).unwrap();
        let t = LossTable::new(&m);
        // R = [yf, y] means
        let r = [2.0 / 5.0, 3.0 / 5.0];
        let q = optimal_proposal(&m, &t, &uniform(5), LabelDist::Labels(&y), &r).unwrap();
        // Dg = [1/R2, -R1/R2²]; v(x) = |yf/R2 − y R1/R2²|
        let (r1, r2) = (r[0], r[1]);
        let v: Vec<f64> = (0..5)
            .map(|i| {
                let yy = y[i] as f64;
                (yy * f[i] / r2 - yy * r1 / (r2 * r2)).abs()
            })
            .collect();
        let total: f64 = v.iter().sum();
        for i in 0..5 {
            assert!((q.probs[i] - v[i] / total).abs() < 1e-15);
        }
    }

    #[test]
    fn det_with_truth_and_no_floor_is_optimal() {
        let f = [1.0, 0.0, 1.0, 0.0, 1.0];
        let y = [1usize, 1, 0, 0, 1];
        let m = make_binary_measure(BinaryMeasure::FBeta { beta: 1.0 }, preds(&f)).unwrap();
        let t = LossTable::new(&m);
        let p = uniform(5);
        let r = plugin_risk(&t, &p, LabelDist::Labels(&y));
        let q_star = optimal_proposal(&m, &t, &p, LabelDist::Labels(&y), &r).unwrap();
        let q = adapted_proposal_det(&m, &t, &p, LabelDist::Labels(&y), &r, 0.0, 3).unwrap();
        for i in 0..5 {
            assert!((q.probs[i] - q_star.probs[i]).abs() < 1e-15);
        }
        assert_eq!(kl_to_optimal(&q, &q_star), 0.0);
    }

    #[test]
    fn large_epsilon_floods_support() {
        let m = make_binary_measure(BinaryMeasure::Accuracy, preds(&[1.0, 0.0, 1.0])).unwrap();
        let t = LossTable::new(&m);
        let pi = vec![0.5; 6];
        let q = adapted_proposal_det(&m, &t, &uniform(3), LabelDist::PerItem(&pi), &[0.3], 1e6, 0).unwrap();
        for p in &q.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn observed_zero_loss_item_gets_no_mass() {
        let m = make_binary_measure(BinaryMeasure::Accuracy, preds(&[1.0, 0.0])).unwrap();
        let t = LossTable::new(&m);
        let probs = vec![0.5, 0.5];
        let observed = vec![Some(1), None];
        let dist = LabelDist::Blocked {
            block_of: &[0, 0],
            probs: &probs,
            observed: &observed,
        };
        let q = adapted_proposal_det(&m, &t, &uniform(2), dist, &[0.4], 0.1, 1).unwrap();
        assert_eq!(q.probs[0], 0.0);
        assert_eq!(q.probs[1], 1.0);
    }

    #[test]
    fn stochastic_hand_evaluation() {
        // accuracy, Dg = -1: ‖Dg ℓ‖² = ℓ
        let f = [1.0, 0.0, 1.0, 1.0];
        let m = make_binary_measure(BinaryMeasure::Accuracy, preds(&f)).unwrap();
        let t = LossTable::new(&m);
        let p_hat = vec![0.3, 0.7, 0.9, 0.1, 0.5, 0.5, 0.0, 1.0];
        let q = adapted_proposal_stoch(&m, &t, &uniform(4), LabelDist::PerItem(&p_hat), &[0.2], 0.0, 0).unwrap();
        let v = [0.3f64.sqrt(), 0.1f64.sqrt(), 0.5f64.sqrt(), 0.0];
        let total: f64 = v.iter().sum();
        for i in 0..4 {
            assert!((q.probs[i] - v[i] / total).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_proposal_errors() {
        let m = make_binary_measure(BinaryMeasure::Accuracy, preds(&[1.0])).unwrap();
        let t = LossTable::new(&m);
        let err = adapted_proposal_det(&m, &t, &[1.0], LabelDist::Labels(&[1]), &[0.0], 0.1, 0);
        assert_eq!(err.unwrap_err(), Error::DegenerateProposal);
        let err = optimal_proposal(&m, &t, &[1.0], LabelDist::Labels(&[1]), &[0.0]);
        assert_eq!(err.unwrap_err(), Error::DegenerateMeasure);
    }

    #[test]
    fn schedules() {
        let det = EpsilonSchedule::DetFractionUnobserved;
        assert!((det.value(0.1, 0.5, 7) - 0.05).abs() < 1e-15);
        assert_eq!(det.value(0.1, 1.0, 7), 0.0);
        assert_eq!(EpsilonSchedule::StochInverseT.value(1.0, 0.0, 0), 1.0);
    }

    #[test]
    fn mixing() {
        let q = Proposal::from_weights(vec![1.0, 0.0], 0, 0.0).unwrap();
        let p = uniform(2);
        assert_eq!(mix_with_marginal(&q, 0.5, &p).unwrap().probs, vec![0.75, 0.25]);
        assert_eq!(mix_with_marginal(&q, 1.0, &p).unwrap().probs, p);
        assert_eq!(mix_with_marginal(&q, 0.0, &p).unwrap(), q);
    }

    #[test]
    fn kl_closed_forms() {
        let q = Proposal::from_weights(vec![1.0, 1.0], 0, 0.0).unwrap();
        let star = Proposal::from_weights(vec![1.0, 0.0], 0, 0.0).unwrap();
        assert!((kl_to_optimal(&q, &star) - core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_to_optimal(&q, &q), 0.0);
        assert_eq!(kl_to_optimal(&star, &q), f64::INFINITY);
    }
}
