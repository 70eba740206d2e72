#![allow(dead_code)]

use std::sync::Arc;

use aiseval_core::measures::{MeasureSpec, PredictionSource};
use aiseval_core::partition::{Partition, PartitionTree};
use aiseval_core::pool::binary_scores;
use aiseval_core::sampler::EvalContext;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Binary predictions with `raw` as the positive-class score.
pub fn binary_predictions(raw: &[f64]) -> Arc<PredictionSource> {
    let scores: Vec<f64> = raw.iter().flat_map(|&s| binary_scores(s, false)).collect();
    Arc::new(PredictionSource::from_scores(2, scores, raw.to_vec()).unwrap())
}

pub fn context(spec: &MeasureSpec, raw: &[f64], marginal: Vec<f64>, partition: Partition) -> EvalContext {
    let measure = spec.build(binary_predictions(raw)).unwrap();
    EvalContext::new(measure, partition, marginal).unwrap()
}

pub fn uniform(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

pub fn normalized(w: Vec<f64>) -> Vec<f64> {
    let t: f64 = w.iter().sum();
    w.into_iter().map(|x| x / t).collect()
}

/// Synthetic imbalanced binary pool: labels with positive rate `rate`,
/// scores `σ(quality·(2y−1) + N(0,1))`.
pub fn synthetic(m: usize, rate: f64, quality: f64, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let mut raw = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let y = usize::from(r.random::<f64>() < rate);
        let noise: f64 = r.sample(rand_distr::StandardNormal);
        let logit = quality * (2.0 * y as f64 - 1.0) + noise;
        raw.push(1.0 / (1.0 + (-logit).exp()));
        labels.push(y);
    }
    (raw, labels)
}

pub fn csf_partition(raw: &[f64], branching: usize, depth: usize) -> Partition {
    Partition::from_scores_csf(raw, branching, depth, 1024).unwrap()
}

pub fn single_block(m: usize) -> Partition {
    Partition::new(PartitionTree::flat(1).unwrap(), vec![0; m]).unwrap()
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
