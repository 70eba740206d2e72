//! Online models of the oracle response `p(y|x)` over a hierarchical
//! partition.
//!
//! [`DirichletTreeModel`] targets deterministic oracles: every item has one
//! true label, observed or not. A Dirichlet prior on the global response
//! `θ` and a Dirichlet-tree prior on each class's leaf distribution `ψ_y`
//! are fit by EM, treating unobserved labels as missing data. Each internal
//! node carries a Dirichlet over its children's branch probabilities
//! `b_{yc}`; `ψ_{yk}` is the product of branch probabilities on the path to
//! leaf `k`.
//!
//! [`StochasticOracleModel`] targets stochastic oracles: conjugate counts
//! updated with importance weights and read out through the posterior
//! predictive.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::measures::PredictionSource;
use crate::partition::{Partition, PartitionTree};

/// Smallest admissible mode numerator (`α̃ − 1`, `β̃ − 1`).
pub const MODE_FLOOR: f64 = 1e-12;

/// Prior concentrations: `alpha[y]` and `beta[y][ν]` (row-major `C × nodes`;
/// the root column is unused).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub n_classes: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Hyperparameters {
    #[inline]
    pub fn beta(&self, y: usize, node: usize, n_nodes: usize) -> f64 {
        self.beta[y * n_nodes + node]
    }
}

/// Block-mean classifier scores `s̄(y|k)`, row-major `K × C`; empty blocks
/// contribute zeros.
pub fn block_mean_scores(partition: &Partition, predictions: &PredictionSource) -> Vec<f64> {
    let c = predictions.n_classes();
    let k = partition.n_blocks();
    let mut sums = vec![0.0; k * c];
    for i in 0..partition.n_items() {
        let b = partition.block_of(i);
        for y in 0..c {
            sums[b * c + y] += predictions.score(y, i);
        }
    }
    for (b, &n) in partition.block_sizes().iter().enumerate() {
        if n > 0 {
            for y in 0..c {
                sums[b * c + y] /= n as f64;
            }
        }
    }
    sums
}

/// Score-informed priors:
/// `α_y = 1 + Σ_k s̄(y|k)` and `β_{yν} = depth(ν)² + Σ_k s̄(y|k)·δ_ν(k)`.
pub fn init_hyperparams(partition: &Partition, predictions: &PredictionSource) -> Hyperparameters {
    let c = predictions.n_classes();
    let tree = partition.tree();
    let n_nodes = tree.n_nodes();
    let means = block_mean_scores(partition, predictions);
    let mut alpha = vec![1.0; c];
    let mut beta = vec![0.0; c * n_nodes];
    for y in 0..c {
        for k in 0..tree.n_leaves() {
            alpha[y] += means[k * c + y];
        }
        for v in 1..n_nodes {
            let node = tree.node(v);
            let depth = node.depth as f64;
            let mass: f64 = node.leaves.clone().map(|k| means[k * c + y]).sum();
            beta[y * n_nodes + v] = depth * depth + mass;
        }
    }
    Hyperparameters { n_classes: c, alpha, beta }
}

/// Point estimates `θ`, branch probabilities and the implied `ψ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub theta: Vec<f64>,
    /// `b_{yν}`, row-major `C × nodes` (root column is 1).
    pub branch: Vec<f64>,
    /// `ψ_{yk}`, row-major `C × K`.
    pub psi: Vec<f64>,
}

/// Expected posterior concentrations under the current label distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    pub alpha_tilde: Vec<f64>,
    /// `β̃_{yν}`, row-major `C × nodes`.
    pub beta_tilde: Vec<f64>,
}

impl ExpectedCounts {
    /// `γ̃_{yν} = β̃_{yν} − Σ_{c ∈ children(ν)} β̃_{yc}` for internal `ν`.
    pub fn gamma(&self, tree: &PartitionTree, y: usize, v: usize) -> f64 {
        let n = tree.n_nodes();
        let own = if v == 0 { 0.0 } else { self.beta_tilde[y * n + v] };
        own - tree.node(v).children.clone().map(|c| self.beta_tilde[y * n + c]).sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmReport {
    pub iterations: usize,
    pub converged: bool,
    pub final_change: f64,
}

/// Dirichlet-tree model for a deterministic oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletTreeModel {
    tree: PartitionTree,
    n_classes: usize,
    block_sizes: Vec<usize>,
    prior: Hyperparameters,
    params: TreeParams,
    /// `α̃`, `β̃` from the latest E-step.
    posterior: ExpectedCounts,
    /// Cached oracle labels, one slot per pool item.
    labels: Vec<Option<usize>>,
    /// Observed label counts per block, row-major `K × C`.
    observed_counts: Vec<f64>,
    n_observed: usize,
}

impl DirichletTreeModel {
    /// Builds the model with priors from the classifier scores and starts
    /// the parameters at the prior mode (no EM run yet).
    pub fn new(partition: &Partition, predictions: &PredictionSource) -> Result<Self> {
        if partition.n_items() != predictions.len() {
            return Err(Error::BlockMap("partition and predictions disagree on pool size".into()));
        }
        let prior = init_hyperparams(partition, predictions);
        Self::with_prior(partition, prior)
    }

    pub fn with_prior(partition: &Partition, prior: Hyperparameters) -> Result<Self> {
        let tree = partition.tree().clone();
        let c = prior.n_classes;
        if prior.alpha.len() != c || prior.beta.len() != c * tree.n_nodes() {
            return Err(Error::Config("hyperparameter shapes do not match the tree".into()));
        }
        if prior.alpha.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        let zero = ExpectedCounts {
            alpha_tilde: prior.alpha.clone(),
            beta_tilde: prior.beta.clone(),
        };
        let mut model = Self {
            n_classes: c,
            block_sizes: partition.block_sizes().to_vec(),
            labels: vec![None; partition.n_items()],
            observed_counts: vec![0.0; partition.n_blocks() * c],
            n_observed: 0,
            params: TreeParams {
                theta: vec![],
                branch: vec![],
                psi: vec![],
            },
            posterior: zero,
            prior,
            tree,
        };
        model.reset_params();
        Ok(model)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_blocks(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn n_items(&self) -> usize {
        self.labels.len()
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn prior(&self) -> &Hyperparameters {
        &self.prior
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    /// `α̃`, `β̃` at the latest E-step (the prior before any fit).
    pub fn posterior_counts(&self) -> &ExpectedCounts {
        &self.posterior
    }

    /// Returns the parameters to the prior mode (cold start).
    pub fn reset_params(&mut self) {
        self.posterior = ExpectedCounts {
            alpha_tilde: self.prior.alpha.clone(),
            beta_tilde: self.prior.beta.clone(),
        };
        self.params = self.m_step(&self.posterior);
    }

    pub fn theta(&self) -> &[f64] {
        &self.params.theta
    }

    #[inline]
    pub fn psi(&self, y: usize, k: usize) -> f64 {
        self.params.psi[y * self.n_blocks() + k]
    }

    pub fn n_observed(&self) -> usize {
        self.n_observed
    }

    pub fn fraction_observed(&self) -> f64 {
        self.n_observed as f64 / self.labels.len() as f64
    }

    pub fn cached_label(&self, item: usize) -> Option<usize> {
        self.labels[item]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Records the oracle's answer for `item` (in `block`). Repeat
    /// observations are ignored: the first label is authoritative.
    pub fn observe(&mut self, item: usize, block: usize, label: usize) -> Result<bool> {
        if label >= self.n_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.n_classes,
            });
        }
        if item >= self.labels.len() {
            return Err(Error::ItemOutOfRange {
                item,
                size: self.labels.len(),
            });
        }
        if block >= self.n_blocks() {
            return Err(Error::BlockMap(alloc::format!("block {block} out of range")));
        }
        if self.labels[item].is_some() {
            return Ok(false);
        }
        self.labels[item] = Some(label);
        self.observed_counts[block * self.n_classes + label] += 1.0;
        self.n_observed += 1;
        Ok(true)
    }

    /// `π(y|k) ∝ ψ_{yk} θ_y` for unobserved items in block `k`.
    pub fn block_posterior(&self, k: usize) -> Vec<f64> {
        block_posterior_from(&self.params, self.n_classes, self.n_blocks(), k)
    }

    /// Posteriors for unobserved items of every block, row-major `K × C`.
    pub fn block_posteriors(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_blocks() * self.n_classes);
        for k in 0..self.n_blocks() {
            out.extend(self.block_posterior(k));
        }
        out
    }

    /// `π(y|x)`: a point mass at the cached label once observed.
    pub fn label_posterior(&self, item: usize, block: usize) -> Vec<f64> {
        match self.labels[item] {
            Some(y) => {
                let mut p = vec![0.0; self.n_classes];
                p[y] = 1.0;
                p
            }
            None => self.block_posterior(block),
        }
    }

    /// E-step: expected `α̃`, `β̃` under the label distribution implied by
    /// `params` (backward pass accumulates leaf counts up the tree).
    pub fn expected_counts(&self, params: &TreeParams) -> ExpectedCounts {
        let c = self.n_classes;
        let kk = self.n_blocks();
        let n_nodes = self.tree.n_nodes();
        let mut node_counts = vec![0.0; c * n_nodes];
        let mut alpha_tilde = self.prior.alpha.clone();
        for k in 0..kk {
            let observed_here: f64 = self.observed_counts[k * c..(k + 1) * c].iter().sum();
            let unobserved = self.block_sizes[k] as f64 - observed_here;
            let post = block_posterior_from(params, c, kk, k);
            let leaf = self.tree.leaf_node(k);
            for y in 0..c {
                let count = self.observed_counts[k * c + y] + unobserved * post[y];
                node_counts[y * n_nodes + leaf] += count;
                alpha_tilde[y] += count;
            }
        }
        for v in (0..n_nodes).rev() {
            if let Some(parent) = self.tree.node(v).parent {
                for y in 0..c {
                    node_counts[y * n_nodes + parent] += node_counts[y * n_nodes + v];
                }
            }
        }
        let mut beta_tilde = self.prior.beta.clone();
        for y in 0..c {
            for v in 1..n_nodes {
                beta_tilde[y * n_nodes + v] += node_counts[y * n_nodes + v];
            }
        }
        ExpectedCounts {
            alpha_tilde,
            beta_tilde,
        }
    }

    /// M-step: `θ` at the Dirichlet mode, branch probabilities at the mode
    /// of each node's Dirichlet, `ψ` by a forward pass.
    pub fn m_step(&self, counts: &ExpectedCounts) -> TreeParams {
        let c = self.n_classes;
        let n_nodes = self.tree.n_nodes();
        let kk = self.tree.n_leaves();
        let theta = normalized_modes(&counts.alpha_tilde);
        let mut branch = vec![0.0; c * n_nodes];
        let mut psi = vec![0.0; c * kk];
        for y in 0..c {
            let row = &mut branch[y * n_nodes..(y + 1) * n_nodes];
            let beta = &counts.beta_tilde[y * n_nodes..(y + 1) * n_nodes];
            // mass reaching each node; reuse `row` for b and a local for mass
            let mut mass = vec![0.0; n_nodes];
            mass[0] = 1.0;
            row[0] = 1.0;
            for v in self.tree.internal_nodes() {
                let children = self.tree.node(v).children.clone();
                let total: f64 = children.clone().map(|ch| (beta[ch] - 1.0).max(MODE_FLOOR)).sum();
                for ch in children {
                    let b = (beta[ch] - 1.0).max(MODE_FLOOR) / total;
                    row[ch] = b;
                    mass[ch] = mass[v] * b;
                }
            }
            for k in 0..kk {
                psi[y * kk + k] = mass[self.tree.leaf_node(k)];
            }
        }
        TreeParams { theta, branch, psi }
    }

    /// `Q(φ | φ^{(τ)})` up to its constant, given the E-step counts.
    pub fn q_function(&self, params: &TreeParams, counts: &ExpectedCounts) -> f64 {
        let c = self.n_classes;
        let n_nodes = self.tree.n_nodes();
        let mut q = 0.0;
        for y in 0..c {
            q += (counts.alpha_tilde[y] - 1.0) * math::ln(params.theta[y]);
            for v in 1..n_nodes {
                q += (counts.beta_tilde[y * n_nodes + v] - 1.0) * math::ln(params.branch[y * n_nodes + v]);
            }
        }
        q
    }

    /// Observed-data log posterior of `params` (up to a constant): prior
    /// plus observed-label likelihood plus the marginal likelihood of the
    /// unobserved items' block assignments.
    pub fn log_posterior(&self, params: &TreeParams) -> f64 {
        let c = self.n_classes;
        let kk = self.n_blocks();
        let n_nodes = self.tree.n_nodes();
        let mut lp = 0.0;
        for y in 0..c {
            lp += (self.prior.alpha[y] - 1.0) * math::ln(params.theta[y]);
            for v in 1..n_nodes {
                lp += (self.prior.beta[y * n_nodes + v] - 1.0) * math::ln(params.branch[y * n_nodes + v]);
            }
        }
        for k in 0..kk {
            let mut observed_here = 0.0;
            let mut evidence = 0.0;
            for y in 0..c {
                let joint = params.theta[y] * params.psi[y * kk + k];
                let n = self.observed_counts[k * c + y];
                if n > 0.0 {
                    lp += n * math::ln(joint);
                }
                observed_here += n;
                evidence += joint;
            }
            let unobserved = self.block_sizes[k] as f64 - observed_here;
            if unobserved > 0.0 {
                lp += unobserved * math::ln(evidence);
            }
        }
        lp
    }

    /// Runs EM from the current parameters (warm start) until the max-norm
    /// change in `θ` and the branch probabilities drops below `tol`.
    pub fn em_fit(&mut self, options: EmOptions) -> EmReport {
        let mut change = f64::INFINITY;
        let mut iterations = 0;
        while iterations < options.max_iter {
            let counts = self.expected_counts(&self.params);
            let next = self.m_step(&counts);
            change = max_abs_diff(&next.theta, &self.params.theta)
                .max(max_abs_diff(&next.branch, &self.params.branch));
            self.params = next;
            self.posterior = counts;
            iterations += 1;
            if change < options.tol {
                break;
            }
        }
        EmReport {
            iterations,
            converged: change < options.tol,
            final_change: change,
        }
    }

    /// One EM iteration, returning `(Q(old|old), Q(new|old))`.
    pub fn em_step(&mut self) -> (f64, f64) {
        let counts = self.expected_counts(&self.params);
        let before = self.q_function(&self.params, &counts);
        let next = self.m_step(&counts);
        let after = self.q_function(&next, &counts);
        self.params = next;
        self.posterior = counts;
        (before, after)
    }
}

fn block_posterior_from(params: &TreeParams, c: usize, kk: usize, k: usize) -> Vec<f64> {
    let mut post: Vec<f64> = (0..c).map(|y| params.psi[y * kk + k] * params.theta[y]).collect();
    let total: f64 = post.iter().sum();
    if total > 0.0 {
        for p in post.iter_mut() {
            *p /= total;
        }
    } else {
        post.iter_mut().for_each(|p| *p = 1.0 / c as f64);
    }
    post
}

fn normalized_modes(concentration: &[f64]) -> Vec<f64> {
    let numer: Vec<f64> = concentration.iter().map(|a| (a - 1.0).max(MODE_FLOOR)).collect();
    let total: f64 = numer.iter().sum();
    numer.into_iter().map(|n| n / total).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| math::abs(x - y)).fold(0.0, f64::max)
}

/// Posterior-predictive model for a stochastic oracle with importance-
/// weighted (bias-corrected) counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticOracleModel {
    tree: PartitionTree,
    n_classes: usize,
    prior: Hyperparameters,
    alpha_tilde: Vec<f64>,
    /// row-major `C × nodes`
    beta_tilde: Vec<f64>,
}

impl StochasticOracleModel {
    pub fn new(partition: &Partition, predictions: &PredictionSource) -> Self {
        let prior = init_hyperparams(partition, predictions);
        Self::with_prior(partition.tree().clone(), prior)
    }

    pub fn with_prior(tree: PartitionTree, prior: Hyperparameters) -> Self {
        Self {
            n_classes: prior.n_classes,
            alpha_tilde: prior.alpha.clone(),
            beta_tilde: prior.beta.clone(),
            prior,
            tree,
        }
    }

    pub fn alpha_tilde(&self) -> &[f64] {
        &self.alpha_tilde
    }

    pub fn beta_tilde(&self, y: usize, node: usize) -> f64 {
        self.beta_tilde[y * self.tree.n_nodes() + node]
    }

    pub fn prior(&self) -> &Hyperparameters {
        &self.prior
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    /// Adds weighted counts for `(block, label, weight)` records:
    /// `α̃_y += w·1{y'=y}`, `β̃_{yc} += w·1{y'=y}·δ_c(k)`. Records with a
    /// negative or non-finite weight are rejected and leave the model as is.
    pub fn update(&mut self, records: &[(usize, usize, f64)]) -> Result<()> {
        for (index, &(block, label, weight)) in records.iter().enumerate() {
            if !(weight >= 0.0) || !weight.is_finite() {
                return Err(Error::InvalidWeight { index, weight });
            }
            if label >= self.n_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.n_classes,
                });
            }
            if block >= self.tree.n_leaves() {
                return Err(Error::BlockMap(alloc::format!("block {block} out of range")));
            }
        }
        let n_nodes = self.tree.n_nodes();
        for &(block, label, weight) in records {
            self.alpha_tilde[label] += weight;
            for v in self.tree.path(block) {
                self.beta_tilde[label * n_nodes + v] += weight;
            }
        }
        Ok(())
    }

    /// `p(y|k) ∝ α̃_y · Π_ν Π_c (β̃_{yc} / Σ_{c'} β̃_{yc'})^{δ_c(k)}`.
    pub fn posterior_predictive(&self, block: usize) -> Vec<f64> {
        let n_nodes = self.tree.n_nodes();
        let path = self.tree.path(block);
        let mut p: Vec<f64> = (0..self.n_classes)
            .map(|y| {
                let mut v = self.alpha_tilde[y];
                for &node in &path {
                    let parent = self.tree.node(node).parent.expect("non-root node");
                    let siblings: f64 = self
                        .tree
                        .node(parent)
                        .children
                        .clone()
                        .map(|s| self.beta_tilde[y * n_nodes + s])
                        .sum();
                    v *= self.beta_tilde[y * n_nodes + node] / siblings;
                }
                v
            })
            .collect();
        let total: f64 = p.iter().sum();
        for v in p.iter_mut() {
            *v /= total;
        }
        p
    }

    pub fn posterior_predictives(&self) -> Vec<f64> {
        (0..self.tree.n_leaves()).flat_map(|k| self.posterior_predictive(k)).collect()
    }
}
