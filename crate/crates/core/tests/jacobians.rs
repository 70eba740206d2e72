//! Analytic Jacobians against Richardson-extrapolated central differences
//! at random interior risk vectors.

mod common;

use aiseval_core::measures::{
    make_pr_curve_measure, make_regression_measure, Measure, MeasureSpec, PredictionSource, RegressionMeasure,
};
use aiseval_core::pool::normalize_scores;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

const POINTS: usize = 100;

/// `(4 D(h/2) − D(h)) / 3` with `D` the central difference.
fn richardson(measure: &Measure, r: &[f64], i: usize, j: usize) -> f64 {
    let central = |h: f64| {
        let mut up = r.to_vec();
        let mut down = r.to_vec();
        up[j] += h;
        down[j] -= h;
        (measure.map_defined(&up).unwrap()[i] - measure.map_defined(&down).unwrap()[i]) / (2.0 * h)
    };
    let h = 1e-3 * r[j].abs().max(1e-2);
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}

fn check(measure: &Measure, point: impl Fn(&mut ChaCha8Rng) -> Vec<f64>, seed: u64) {
    let mut rng = common::rng(seed);
    for _ in 0..POINTS {
        let r = point(&mut rng);
        let jac = measure.jacobian(&r).unwrap();
        for i in 0..measure.out_dim() {
            for j in 0..measure.loss_dim() {
                let analytic = jac.get(i, j);
                let numeric = richardson(measure, &r, i, j);
                assert!(
                    (analytic - numeric).abs() <= 1e-6 * analytic.abs().max(1.0),
                    "{}: dg{i}/dR{j} at {r:?}: analytic {analytic}, numeric {numeric}",
                    measure.name()
                );
            }
        }
    }
}

fn binary(spec: MeasureSpec) -> Measure {
    spec.build(common::binary_predictions(&[0.2, 0.7, 0.9])).unwrap()
}

/// A random joint pmf of `(y, f)` away from the simplex boundary, as
/// `[P(y=1,f=1), P(y=1), P(f=1)]`.
fn joint(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
    let t: f64 = w.iter().sum();
    let (p11, p10, p01) = (w[0] / t, w[1] / t, w[2] / t);
    [p11, p11 + p10, p11 + p01]
}

#[test]
fn accuracy_and_brier() {
    check(&binary(MeasureSpec::Accuracy), |r| vec![r.random_range(0.0..1.0)], 1);
    check(&binary(MeasureSpec::Brier), |r| vec![r.random_range(0.0..2.0)], 2);
}

#[test]
fn precision_recall_f_beta() {
    check(&binary(MeasureSpec::Precision), |r| { let j = joint(r); vec![j[0], j[2]] }, 3);
    check(&binary(MeasureSpec::Recall), |r| { let j = joint(r); vec![j[0], j[1]] }, 4);
    for (seed, beta) in [(5, 0.5), (6, 1.0), (7, 2.0)] {
        let spec = if beta == 1.0 { MeasureSpec::F1 } else { MeasureSpec::FBeta { beta } };
        let b2 = beta * beta;
        check(&binary(spec), move |r| { let j = joint(r); vec![j[0], (b2 * j[1] + j[2]) / (1.0 + b2)] }, seed);
    }
}

#[test]
fn three_dimensional_binary_measures() {
    for (seed, spec) in [(8, MeasureSpec::BalancedAccuracy), (9, MeasureSpec::Mcc), (10, MeasureSpec::FowlkesMallows)] {
        check(&binary(spec), |r| joint(r).to_vec(), seed);
    }
}

#[test]
fn regression_measures() {
    let c = 4;
    let scores: Vec<f64> = (0..3 * c).map(|i| (i % 5 + 1) as f64).collect();
    let scores: Vec<f64> = scores.chunks(c).flat_map(|row| normalize_scores(row, false)).collect();
    let preds = Arc::new(PredictionSource::from_scores(c, scores, vec![0.0; 3]).unwrap());
    let responses = vec![-1.0, 0.5, 2.0, 3.0];
    for (seed, kind) in [(11, RegressionMeasure::Mae), (12, RegressionMeasure::Mse)] {
        let m = make_regression_measure(kind, preds.clone(), Some(responses.clone())).unwrap();
        check(&m, |r| vec![r.random_range(0.0..4.0)], seed);
    }
    let r2 = make_regression_measure(RegressionMeasure::R2, preds, Some(responses)).unwrap();
    // moments of random (y, f) distributions with Var(y) bounded away from 0
    check(
        &r2,
        |r| loop {
            let ys: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..3.0)).collect();
            let fs: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..3.0)).collect();
            let mean = |v: &[f64], p: i32| v.iter().map(|x| x.powi(p)).sum::<f64>() / 3.0;
            if mean(&ys, 2) - mean(&ys, 1).powi(2) > 0.25 {
                break vec![mean(&ys, 1), mean(&ys, 2), mean(&fs, 1), mean(&fs, 2)];
            }
        },
        13,
    );
}

#[test]
fn pr_curve() {
    let thresholds = vec![0.1, 0.3, 0.5, 0.7, 0.9];
    let l = thresholds.len();
    let m = make_pr_curve_measure(thresholds, common::binary_predictions(&[0.2, 0.7, 0.9])).unwrap();
    check(
        &m,
        move |r| {
            // P(s ≥ τ_j) decreasing in j, with P(y=1, s ≥ τ_j) below it
            let mut above: Vec<f64> = (0..l).map(|_| r.random_range(0.05..0.95)).collect();
            above.sort_by(|a, b| b.total_cmp(a));
            let hits: Vec<f64> = above.iter().map(|a| a * r.random_range(0.1..0.9)).collect();
            let mut v = above;
            v.extend(hits);
            v.push(r.random_range(0.2..0.9));
            v
        },
        14,
    );
}
