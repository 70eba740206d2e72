//! Importance-weighted estimates, their covariance and confidence regions.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::DrawRecord;
use crate::math::{self, Matrix};
use crate::measures::{pool_measure, Measure};

/// Default significance level for reported regions.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// `{G*: (G* − Ĝ)ᵀ Σ̂⁻¹ (G* − Ĝ) ≤ scale}` plus per-coordinate intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub alpha: f64,
    /// `None` for undefined coordinates of `Ĝ`.
    pub intervals: Vec<Option<Interval>>,
    pub scale: f64,
    /// `Σ̂⁻¹`; absent when `Σ̂` is singular.
    pub precision: Option<Matrix>,
    pub degenerate: bool,
}

impl ConfidenceRegion {
    /// Whether `g` lies inside the ellipsoid (`None` without one).
    pub fn ellipsoid_contains(&self, center: &[f64], g: &[f64]) -> Option<bool> {
        let precision = self.precision.as_ref()?;
        let diff: Vec<f64> = g.iter().zip(center).map(|(a, b)| a - b).collect();
        let pd = precision.mul_vec(&diff);
        let q: f64 = pd.iter().zip(&diff).map(|(a, b)| a * b).sum();
        Some(q <= self.scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub measure: alloc::string::String,
    /// `Ĝ`; `None` where `g` is undefined at `R̂`.
    pub g_hat: Vec<Option<f64>>,
    pub undefined: bool,
    pub r_hat: Vec<f64>,
    pub covariance: Option<Matrix>,
    pub confidence: Option<ConfidenceRegion>,
    pub n_samples: usize,
    pub budget_consumed: usize,
    /// Every pool item is labelled: `Ĝ` is the exact pool value.
    #[serde(default)]
    pub census: bool,
}

impl EstimateReport {
    /// `Ĝ` as plain numbers (undefined coordinates become NaN).
    pub fn values(&self) -> Vec<f64> {
        self.g_hat.iter().map(|g| g.unwrap_or(f64::NAN)).collect()
    }

    pub fn scalar(&self) -> Option<f64> {
        self.g_hat.first().copied().flatten()
    }
}

#[derive(Clone, Debug)]
pub struct EstimateOptions<'a> {
    /// Significance for the confidence region.
    pub alpha: f64,
    /// `q_N`, the most recent proposal, used by the covariance estimator.
    pub latest_proposal: Option<&'a [f64]>,
    pub marginal: &'a [f64],
    /// Full-pool labels: switches to the exact census value.
    pub census_labels: Option<&'a [usize]>,
    pub budget_consumed: usize,
}

/// `R̂ = (1/N) Σ_j w_j ℓ(x_j, y_j)`.
pub fn weighted_risk(measure: &Measure, records: &[DrawRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("history"));
    }
    let d = measure.loss_dim();
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for r in records {
        measure.loss_into(r.item, r.label, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += r.weight * b;
        }
    }
    let n = records.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// `Σ̂ = Dg(R̂) [(1/N) Σ_j p(x_j)² ℓℓᵀ / (q_N(x_j) q_{j−1}(x_j)) − R̂R̂ᵀ] Dg(R̂)ᵀ`.
///
/// When `q_N(x_j)` is zero the term uses `q_{j−1}(x_j)` in its place (the
/// term vanishes anyway whenever the loss does).
pub fn estimate_covariance(
    measure: &Measure,
    records: &[DrawRecord],
    r_hat: &[f64],
    latest_proposal: &[f64],
    marginal: &[f64],
) -> Result<Matrix> {
    if records.len() < 2 {
        return Err(Error::EmptyInput("at least two records"));
    }
    let d = measure.loss_dim();
    let mut second = Matrix::zeros(d, d);
    let mut buf = vec![0.0; d];
    for r in records {
        measure.loss_into(r.item, r.label, &mut buf);
        if buf.iter().all(|v| *v == 0.0) {
            continue;
        }
        let p = marginal[r.item];
        let q_now = latest_proposal[r.item];
        let q_now = if q_now > 0.0 { q_now } else { r.proposal_prob };
        let scale = p * p / (q_now * r.proposal_prob);
        for a in 0..d {
            if buf[a] == 0.0 {
                continue;
            }
            for b in 0..d {
                second.add_to(a, b, scale * buf[a] * buf[b]);
            }
        }
    }
    let n = records.len() as f64;
    let mut v = Matrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            v.set(a, b, second.get(a, b) / n - r_hat[a] * r_hat[b]);
        }
    }
    let jac = measure.jacobian(r_hat)?;
    let mut cov = jac.sandwich(&v);
    symmetrize(&mut cov);
    Ok(cov)
}

fn symmetrize(m: &mut Matrix) {
    for i in 0..m.rows() {
        for j in 0..i {
            let avg = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, avg);
            m.set(j, i, avg);
        }
    }
}

/// Ellipsoid scale `(N−1)k / (N(N−k)) · F_{α,k,N−k}` and marginal
/// intervals `Ĝ_i ± √(Σ̂_ii F_{α,1,N−1} / N)`.
pub fn confidence_region(g_hat: &[Option<f64>], covariance: &Matrix, n: usize, alpha: f64) -> Result<ConfidenceRegion> {
    let k = g_hat.len();
    if n <= k {
        return Err(Error::EmptyInput("more samples than measure dimensions"));
    }
    let nf = n as f64;
    let kf = k as f64;
    let f_k = math::f_critical_value(alpha, kf, nf - kf);
    let scale = (nf - 1.0) * kf / (nf * (nf - kf)) * f_k;
    let f_1 = math::f_critical_value(alpha, 1.0, nf - 1.0);
    let intervals = g_hat
        .iter()
        .enumerate()
        .map(|(i, g)| {
            g.map(|g| {
                let half = math::sqrt(covariance.get(i, i).max(0.0) * f_1 / nf);
                Interval { lo: g - half, hi: g + half }
            })
        })
        .collect();
    let precision = if g_hat.iter().all(Option::is_some) {
        covariance.spd_inverse(1e-12)
    } else {
        None
    };
    Ok(ConfidenceRegion {
        alpha,
        intervals,
        scale,
        degenerate: precision.is_none(),
        precision,
    })
}

/// `Ĝ = g(R̂)` with covariance and region when `N > m`.
pub fn estimate_g(measure: &Measure, records: &[DrawRecord], options: &EstimateOptions<'_>) -> Result<EstimateReport> {
    if let Some(labels) = options.census_labels {
        let (r, g_hat) = pool_measure(measure, labels, options.marginal);
        let m = measure.out_dim();
        let undefined = g_hat.iter().any(Option::is_none);
        let zero = Matrix::zeros(m, m);
        let confidence = Some(ConfidenceRegion {
            alpha: options.alpha,
            intervals: g_hat.iter().map(|g| g.map(|g| Interval { lo: g, hi: g })).collect(),
            scale: 0.0,
            precision: None,
            degenerate: true,
        });
        return Ok(EstimateReport {
            measure: measure.name(),
            undefined,
            r_hat: r,
            covariance: Some(zero),
            confidence,
            n_samples: records.len(),
            budget_consumed: options.budget_consumed,
            census: true,
            g_hat,
        });
    }
    let r_hat = weighted_risk(measure, records)?;
    let g_hat = measure.map(&r_hat);
    let undefined = g_hat.iter().any(Option::is_none);
    let n = records.len();
    let m = measure.out_dim();
    let mut covariance = None;
    let mut confidence = None;
    if !undefined && n > m {
        if let Some(latest) = options.latest_proposal {
            let cov = estimate_covariance(measure, records, &r_hat, latest, options.marginal)?;
            confidence = Some(confidence_region(&g_hat, &cov, n, options.alpha)?);
            covariance = Some(cov);
        }
    }
    Ok(EstimateReport {
        measure: measure.name(),
        g_hat,
        undefined,
        r_hat,
        covariance,
        confidence,
        n_samples: n,
        budget_consumed: options.budget_consumed,
        census: false,
    })
}
