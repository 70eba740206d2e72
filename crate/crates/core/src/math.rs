//! Small dense linear algebra and the special functions needed for
//! confidence regions (regularized incomplete beta, F quantiles).

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data has wrong length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.add_to(i, j, a * other.get(k, j));
                }
            }
        }
        out
    }

    /// `self · v`
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matrix-vector shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `A · S · Aᵀ` for square `S`.
    pub fn sandwich(&self, s: &Matrix) -> Matrix {
        self.matmul(s).matmul(&self.transpose())
    }

    /// Inverse of a symmetric positive-definite matrix via Cholesky. Returns
    /// `None` when a pivot falls below `tol` times the largest diagonal entry.
    pub fn spd_inverse(&self, tol: f64) -> Option<Matrix> {
        let n = self.rows;
        if n != self.cols {
            return None;
        }
        let scale = (0..n).map(|i| abs(self.get(i, i))).fold(0.0, f64::max);
        if scale <= 0.0 {
            return None;
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > tol * scale) {
                return None;
            }
            let d = sqrt(d);
            l.set(j, j, d);
            for i in (j + 1)..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / d);
            }
        }
        // invert L, then A⁻¹ = L⁻ᵀ L⁻¹
        let mut linv = Matrix::zeros(n, n);
        for i in 0..n {
            linv.set(i, i, 1.0 / l.get(i, i));
            for j in 0..i {
                let mut s = 0.0;
                for k in j..i {
                    s -= l.get(i, k) * linv.get(k, j);
                }
                linv.set(i, j, s / l.get(i, i));
            }
        }
        Some(linv.transpose().matmul(&linv))
    }
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * ln(x) + b * ln(1.0 - x);
    let front = exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if abs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if abs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if abs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if abs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if abs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if abs(del - 1.0) < EPS {
            break;
        }
    }
    h
}

/// CDF of the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_cdf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    regularized_incomplete_beta(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))
}

/// Upper critical value `F_{α,d1,d2}`: the point with `P(F > x) = α`.
///
/// Inverts the incomplete beta by bisection on the beta scale; the bracket
/// is refined until its width drops below 1e-14 (well past the 1e-10
/// target), so the result is insensitive to the starting interval.
pub fn f_critical_value(alpha: f64, d1: f64, d2: f64) -> f64 {
    assert!(d1 > 0.0 && d2 > 0.0, "degrees of freedom must be positive");
    let p = 1.0 - alpha;
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let (a, b) = (d1 / 2.0, d2 / 2.0);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if regularized_incomplete_beta(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    let x = 0.5 * (lo + hi);
    d2 * x / (d1 * (1.0 - x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn incomplete_beta_matches_closed_forms() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a
        for &x in &[0.1, 0.35, 0.8] {
            assert!((regularized_incomplete_beta(1.0, 1.0, x) - x).abs() < 1e-14);
            assert!((regularized_incomplete_beta(2.5, 1.0, x) - x.powf(2.5)).abs() < 1e-13);
        }
    }

    #[test]
    fn f_quantile_against_statrs() {
        use statrs::distribution::{ContinuousCDF, FisherSnedecor};
        for &(d1, d2) in &[(1.0, 10.0), (2.0, 99.0), (3.0, 497.0), (5.0, 7.0)] {
            let f = FisherSnedecor::new(d1, d2).unwrap();
            for &alpha in &[0.01, 0.05, 0.5] {
                let ours = f_critical_value(alpha, d1, d2);
                let theirs = f.inverse_cdf(1.0 - alpha);
                assert!(
                    (ours - theirs).abs() < 1e-8 * theirs.max(1.0),
                    "d1={d1} d2={d2} alpha={alpha}: {ours} vs {theirs}"
                );
            }
        }
    }

    #[test]
    fn alpha_one_gives_zero() {
        assert_eq!(f_critical_value(1.0, 2.0, 30.0), 0.0);
    }

    #[test]
    fn spd_inverse_roundtrip() {
        let a = Matrix::from_rows(2, 2, alloc::vec![4.0, 1.0, 1.0, 3.0]);
        let inv = a.spd_inverse(1e-12).unwrap();
        let id = a.matmul(&inv);
        assert!((id.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(id.get(0, 1).abs() < 1e-12);
        let singular = Matrix::from_rows(2, 2, alloc::vec![1.0, 1.0, 1.0, 1.0]);
        assert!(singular.spd_inverse(1e-12).is_none());
    }
}
