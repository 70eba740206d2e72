//! Simulated oracles answering from held-out labels.

use aiseval_core::pool::TestPool;
use aiseval_core::sampler::{sample_label, Oracle};
use rand::RngCore;

use crate::{Error, Result};

/// Deterministic oracle with first-query budget accounting.
#[derive(Clone, Debug)]
pub struct SimulatedOracle {
    labels: Vec<usize>,
    seen: Vec<bool>,
    budget: usize,
    queries: usize,
}

/// Fails with the id of the first item lacking a ground-truth label.
pub fn simulate_oracle(pool: &TestPool) -> Result<SimulatedOracle> {
    let labels = pool.true_labels().map_err(|e| match e {
        aiseval_core::Error::MissingLabel(id) => Error::Config(format!("item `{id}` has no ground-truth label")),
        other => other.into(),
    })?;
    Ok(SimulatedOracle::new(labels))
}

impl SimulatedOracle {
    pub fn new(labels: Vec<usize>) -> Self {
        let n = labels.len();
        Self {
            labels,
            seen: vec![false; n],
            budget: 0,
            queries: 0,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Distinct items queried.
    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn queries(&self) -> usize {
        self.queries
    }
}

impl Oracle for SimulatedOracle {
    fn query(&mut self, item: usize) -> aiseval_core::Result<usize> {
        let y = *self.labels.get(item).ok_or(aiseval_core::Error::ItemOutOfRange {
            item,
            size: self.labels.len(),
        })?;
        self.queries += 1;
        if !self.seen[item] {
            self.seen[item] = true;
            self.budget += 1;
        }
        Ok(y)
    }
}

/// Stochastic oracle: each query draws a fresh label from the item's pmf
/// and costs one unit of budget.
#[derive(Clone, Debug)]
pub struct StochasticOracle<R> {
    n_classes: usize,
    pmf: Vec<f64>,
    rng: R,
    budget: usize,
}

impl<R: RngCore> StochasticOracle<R> {
    /// `pmf` is row-major `M × C`; rows must sum to one.
    pub fn new(n_classes: usize, pmf: Vec<f64>, rng: R) -> Result<Self> {
        if n_classes == 0 || pmf.len() % n_classes != 0 {
            return Err(Error::Config("pmf length is not a multiple of the class count".into()));
        }
        for (i, row) in pmf.chunks(n_classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Config(format!("pmf row {i} is not a distribution")));
            }
        }
        Ok(Self {
            n_classes,
            pmf,
            rng,
            budget: 0,
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn pmf(&self, item: usize) -> &[f64] {
        &self.pmf[item * self.n_classes..(item + 1) * self.n_classes]
    }
}

impl<R: RngCore> Oracle for StochasticOracle<R> {
    fn query(&mut self, item: usize) -> aiseval_core::Result<usize> {
        let m = self.pmf.len() / self.n_classes;
        if item >= m {
            return Err(aiseval_core::Error::ItemOutOfRange { item, size: m });
        }
        self.budget += 1;
        let row = &self.pmf[item * self.n_classes..(item + 1) * self.n_classes];
        Ok(sample_label(row, &mut self.rng))
    }
}
