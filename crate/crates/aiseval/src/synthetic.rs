//! Seeded synthetic pools for desk-scale experiments.
//!
//! Labels are Bernoulli with positive rate `1 / (1 + imbalance)`. The
//! classifier logit is `quality·(2y − 1) + ε` with `ε ~ N(0, 1)`, so higher
//! quality separates the classes further; the score is the logistic of the
//! logit.

use aiseval_core::pool::{binary_scores, PoolItem, TestPool};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoolSpec {
    pub size: usize,
    /// Negatives per positive.
    pub imbalance: f64,
    pub quality: f64,
    pub seed: u64,
}

impl SyntheticPoolSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.size < 2 {
            return Err(Error::Config("synthetic pool needs at least 2 items".into()));
        }
        if !(self.imbalance > 0.0) || !self.imbalance.is_finite() {
            return Err(Error::Config("imbalance ratio must be positive".into()));
        }
        if !(self.quality >= 0.0) {
            return Err(Error::Config("quality must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn positive_rate(&self) -> f64 {
        1.0 / (1.0 + self.imbalance)
    }
}

pub fn generate_synthetic_pool(spec: &SyntheticPoolSpec) -> Result<TestPool, Error> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let rate = spec.positive_rate();
    let items = (0..spec.size)
        .map(|i| {
            let y = usize::from(rng.random::<f64>() < rate);
            let noise: f64 = rng.sample(StandardNormal);
            let logit = spec.quality * (2.0 * y as f64 - 1.0) + noise;
            let p = 1.0 / (1.0 + (-logit).exp());
            PoolItem {
                id: format!("item-{i:06}"),
                display: Some(format!("synthetic item {i}")),
                scores: binary_scores(p, false),
                raw_score: p,
                true_label: Some(y),
            }
        })
        .collect();
    Ok(TestPool::new(2, items)?)
}
