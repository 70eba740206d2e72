//! The adaptive sampling loop and the baseline estimators.
//!
//! [`AisSampler`] is a resumable state machine: draw items from the current
//! proposal, record the oracle's labels, and at the end of every stage refit
//! the oracle model and rebuild the proposal. The caller owns the RNG and the
//! oracle, which lets the same machine drive simulations and the labelling
//! service.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::alias::{uniform01, AliasTable};
use crate::error::{Error, Result};
use crate::estimate::{estimate_g, EstimateOptions, EstimateReport, DEFAULT_ALPHA};
use crate::history::{DrawRecord, RunHistory};
use crate::math::Matrix;
use crate::measures::Measure;
use crate::model::{DirichletTreeModel, EmOptions, EmReport, StochasticOracleModel};
use crate::partition::Partition;
use crate::proposal::{
    adapted_proposal_det, adapted_proposal_stoch, kl_to_optimal, mix_with_marginal, plugin_risk, EpsilonSchedule,
    LabelDist, LossTable, Proposal,
};

/// Source of labels.
pub trait Oracle {
    fn query(&mut self, item: usize) -> Result<usize>;
}

impl<F: FnMut(usize) -> Result<usize>> Oracle for F {
    fn query(&mut self, item: usize) -> Result<usize> {
        self(item)
    }
}

/// Deterministic oracle backed by known labels.
#[derive(Clone, Copy, Debug)]
pub struct LabelOracle<'a>(pub &'a [usize]);

impl Oracle for LabelOracle<'_> {
    fn query(&mut self, item: usize) -> Result<usize> {
        self.0.get(item).copied().ok_or(Error::ItemOutOfRange {
            item,
            size: self.0.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// One label per item; repeat queries hit the cache and cost nothing.
    #[default]
    Deterministic,
    /// Labels drawn afresh on each query; every query costs budget.
    Stochastic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalRule {
    /// Rebuilt each stage from the fitted oracle model.
    #[default]
    Adaptive,
    /// Built once from the classifier scores.
    Static,
    /// The pool marginal.
    Passive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub rule: ProposalRule,
    pub oracle: OracleMode,
    pub epsilon0: f64,
    pub delta: f64,
    pub stage_size: usize,
    pub em: EmOptions,
    /// Significance of reported confidence regions.
    pub alpha: f64,
    /// Log per-stage zero-mass sets (needed to audit sample reuse).
    pub log_support: bool,
    /// Hard cap on the number of draws in one run call.
    pub max_draws: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            rule: ProposalRule::Adaptive,
            oracle: OracleMode::Deterministic,
            epsilon0: 1e-3,
            delta: 0.0,
            stage_size: 10,
            em: EmOptions::default(),
            alpha: DEFAULT_ALPHA,
            log_support: true,
            max_draws: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_size == 0 {
            return Err(Error::Config("stage size must be at least 1".into()));
        }
        if !(self.epsilon0 > 0.0) || !self.epsilon0.is_finite() {
            return Err(Error::Config("epsilon0 must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config("delta must lie in [0, 1]".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Immutable inputs shared by every run on one pool/measure pair.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub measure: Arc<Measure>,
    pub table: Arc<LossTable>,
    pub partition: Arc<Partition>,
    pub marginal: Arc<[f64]>,
}

impl EvalContext {
    pub fn new(measure: Measure, partition: Partition, marginal: Vec<f64>) -> Result<Self> {
        let m = measure.n_items();
        if partition.n_items() != m || marginal.len() != m {
            return Err(Error::InvalidPool("measure, partition and marginal disagree on pool size".into()));
        }
        let table = LossTable::new(&measure);
        Ok(Self {
            measure: Arc::new(measure),
            table: Arc::new(table),
            partition: Arc::new(partition),
            marginal: marginal.into(),
        })
    }

    /// Same pool, another partition (loss table shared).
    pub fn with_partition(&self, partition: Partition) -> Result<Self> {
        if partition.n_items() != self.marginal.len() {
            return Err(Error::InvalidPool("partition size mismatch".into()));
        }
        Ok(Self {
            partition: Arc::new(partition),
            ..self.clone()
        })
    }

    pub fn n_items(&self) -> usize {
        self.marginal.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelState {
    None,
    Tree(DirichletTreeModel),
    Stochastic(StochasticOracleModel),
}

/// Everything needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub config: SamplerConfig,
    /// Stage `t` currently drawing from `q_{t−1}` (1-based).
    pub stage: usize,
    pub draws_in_stage: usize,
    pub proposal: Proposal,
    pub model: ModelState,
    /// Oracle answers per item (deterministic mode).
    pub labels: Vec<Option<usize>>,
    pub history: RunHistory,
    #[serde(default)]
    pub last_em: Option<EmReport>,
}

/// One draw from the current proposal, not yet labelled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub item: usize,
    pub stage: usize,
    pub weight: f64,
    pub proposal_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOutcome {
    /// The label consumed budget.
    pub new_label: bool,
    pub stage_advanced: bool,
}

pub struct AisSampler {
    ctx: EvalContext,
    state: SamplerState,
    alias: AliasTable,
}

impl core::fmt::Debug for AisSampler {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("AisSampler")
            .field("stage", &self.state.stage)
            .field("records", &self.state.history.len())
            .field("budget", &self.state.history.budget_consumed())
            .finish()
    }
}

impl AisSampler {
    pub fn new(ctx: EvalContext, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let m = ctx.n_items();
        let predictions = ctx.measure.predictions().clone();
        let model = match (config.rule, config.oracle) {
            (ProposalRule::Adaptive, OracleMode::Deterministic) => {
                ModelState::Tree(DirichletTreeModel::new(&ctx.partition, &predictions)?)
            }
            (ProposalRule::Adaptive, OracleMode::Stochastic) => {
                ModelState::Stochastic(StochasticOracleModel::new(&ctx.partition, &predictions))
            }
            _ => ModelState::None,
        };
        let mut state = SamplerState {
            config,
            stage: 1,
            draws_in_stage: 0,
            proposal: Proposal::marginal(&ctx.marginal),
            model,
            labels: vec![None; m],
            history: RunHistory::new(m),
            last_em: None,
        };
        if let ModelState::Tree(model) = &mut state.model {
            state.last_em = Some(model.em_fit(state.config.em));
        }
        state.proposal = match state.config.rule {
            ProposalRule::Passive => Proposal::marginal(&ctx.marginal),
            ProposalRule::Static => static_proposal(&ctx, state.config.epsilon0, state.config.delta)?,
            ProposalRule::Adaptive => build_adaptive(&ctx, &state, 0)?,
        };
        if state.config.log_support {
            state.history.log_support(0, &state.proposal);
        }
        let alias = AliasTable::new(&state.proposal.probs)?;
        Ok(Self { ctx, state, alias })
    }

    /// Restores a serialized run; the next draw uses the saved proposal.
    pub fn resume(ctx: EvalContext, mut state: SamplerState) -> Result<Self> {
        state.config.validate()?;
        if state.proposal.len() != ctx.n_items() || state.labels.len() != ctx.n_items() {
            return Err(Error::State("saved state does not match the pool".into()));
        }
        state.history.rebuild_support_cache();
        let alias = AliasTable::new(&state.proposal.probs)?;
        Ok(Self { ctx, state, alias })
    }

    pub fn context(&self) -> &EvalContext {
        &self.ctx
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn into_state(self) -> SamplerState {
        self.state
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.state.config
    }

    pub fn proposal(&self) -> &Proposal {
        &self.state.proposal
    }

    pub fn history(&self) -> &RunHistory {
        &self.state.history
    }

    pub fn stage(&self) -> usize {
        self.state.stage
    }

    pub fn draws_in_stage(&self) -> usize {
        self.state.draws_in_stage
    }

    pub fn budget_consumed(&self) -> usize {
        self.state.history.budget_consumed()
    }

    pub fn tree_model(&self) -> Option<&DirichletTreeModel> {
        match &self.state.model {
            ModelState::Tree(m) => Some(m),
            _ => None,
        }
    }

    pub fn stochastic_model(&self) -> Option<&StochasticOracleModel> {
        match &self.state.model {
            ModelState::Stochastic(m) => Some(m),
            _ => None,
        }
    }

    /// The cached label of `item` (deterministic mode only).
    pub fn cached_label(&self, item: usize) -> Option<usize> {
        match self.state.config.oracle {
            OracleMode::Deterministic => self.state.labels[item],
            OracleMode::Stochastic => None,
        }
    }

    /// `x ~ q_{t−1}` with its importance weight. Draws do not change state.
    pub fn draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> Draw {
        let item = self.alias.sample(rng);
        let q = self.state.proposal.prob(item);
        Draw {
            item,
            stage: self.state.stage,
            weight: self.ctx.marginal[item] / q,
            proposal_prob: q,
        }
    }

    /// Appends a labelled draw; closes the stage once it is full. Under a
    /// deterministic oracle the first answer for an item is authoritative.
    pub fn record(&mut self, draw: &Draw, label: usize) -> Result<RecordOutcome> {
        if draw.stage != self.state.stage {
            return Err(Error::State("draw belongs to a closed stage".into()));
        }
        let c = self.ctx.measure.n_classes();
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let (label, new_label) = match self.state.config.oracle {
            OracleMode::Deterministic => match self.state.labels[draw.item] {
                Some(cached) => (cached, false),
                None => {
                    self.state.labels[draw.item] = Some(label);
                    (label, true)
                }
            },
            OracleMode::Stochastic => (label, true),
        };
        let record = DrawRecord {
            item: draw.item,
            label,
            weight: draw.weight,
            stage: draw.stage,
            draw: self.state.history.len(),
            proposal_prob: draw.proposal_prob,
        };
        self.state.history.push(record, new_label)?;
        if new_label {
            if let ModelState::Tree(model) = &mut self.state.model {
                model.observe(draw.item, self.ctx.partition.block_of(draw.item), label)?;
            }
        }
        self.state.draws_in_stage += 1;
        let stage_advanced = self.state.draws_in_stage >= self.state.config.stage_size;
        if stage_advanced {
            self.end_stage()?;
        }
        Ok(RecordOutcome {
            new_label,
            stage_advanced,
        })
    }

    /// Closes the current stage early (no-op when it has no draws): refits
    /// the model and rebuilds the proposal.
    pub fn end_stage(&mut self) -> Result<bool> {
        if self.state.draws_in_stage == 0 {
            return Ok(false);
        }
        let start = self.state.history.stage_boundaries().last().copied().unwrap_or(0);
        self.state.history.close_stage();
        match &mut self.state.model {
            ModelState::Tree(model) => {
                self.state.last_em = Some(model.em_fit(self.state.config.em));
            }
            ModelState::Stochastic(model) => {
                let batch: Vec<(usize, usize, f64)> = self.state.history.records()[start..]
                    .iter()
                    .map(|r| (self.ctx.partition.block_of(r.item), r.label, r.weight))
                    .collect();
                model.update(&batch)?;
            }
            ModelState::None => {}
        }
        let t = self.state.stage;
        if self.state.config.rule == ProposalRule::Adaptive {
            let proposal = build_adaptive(&self.ctx, &self.state, t)?;
            self.alias = AliasTable::new(&proposal.probs)?;
            self.state.proposal = proposal;
        } else {
            self.state.proposal.stage = t;
        }
        if self.state.config.log_support {
            self.state.history.log_support(t, &self.state.proposal);
        }
        self.state.stage += 1;
        self.state.draws_in_stage = 0;
        Ok(true)
    }

    /// Draws and labels until `budget` distinct labels are consumed.
    pub fn run_until_budget<O: Oracle + ?Sized, R: RngCore + ?Sized>(
        &mut self,
        oracle: &mut O,
        rng: &mut R,
        budget: usize,
    ) -> Result<()> {
        self.run_until_budget_with(oracle, rng, budget, |_| {})
    }

    /// As [`run_until_budget`](Self::run_until_budget), calling `on_stage`
    /// after every stage advance.
    pub fn run_until_budget_with<O: Oracle + ?Sized, R: RngCore + ?Sized>(
        &mut self,
        oracle: &mut O,
        rng: &mut R,
        budget: usize,
        mut on_stage: impl FnMut(&Self),
    ) -> Result<()> {
        let m = self.ctx.n_items();
        if self.state.config.oracle == OracleMode::Deterministic && budget > m {
            return Err(Error::Config(alloc::format!("budget {budget} exceeds pool size {m}")));
        }
        let mut draws = 0usize;
        while self.budget_consumed() < budget {
            if let Some(cap) = self.state.config.max_draws {
                if draws >= cap {
                    return Err(Error::State(alloc::format!("draw cap {cap} reached before budget {budget}")));
                }
            }
            let outcome = self.step(oracle, rng)?;
            draws += 1;
            if outcome.stage_advanced {
                on_stage(self);
                if !self.can_reach_new_items() {
                    return Err(Error::State("proposal gives no mass to unlabelled items; budget unreachable".into()));
                }
            }
        }
        Ok(())
    }

    /// Exactly `n` draws, regardless of budget.
    pub fn run_draws<O: Oracle + ?Sized, R: RngCore + ?Sized>(&mut self, oracle: &mut O, rng: &mut R, n: usize) -> Result<()> {
        for _ in 0..n {
            self.step(oracle, rng)?;
        }
        Ok(())
    }

    /// One draw-query-record cycle. An oracle failure leaves the state
    /// untouched, so the run can resume.
    pub fn step<O: Oracle + ?Sized, R: RngCore + ?Sized>(&mut self, oracle: &mut O, rng: &mut R) -> Result<RecordOutcome> {
        let draw = self.draw(rng);
        let label = match self.cached_label(draw.item) {
            Some(y) => y,
            None => oracle.query(draw.item)?,
        };
        self.record(&draw, label)
    }

    fn can_reach_new_items(&self) -> bool {
        match self.state.config.oracle {
            OracleMode::Stochastic => true,
            OracleMode::Deterministic => {
                self.budget_consumed() == self.ctx.n_items()
                    || self
                        .state
                        .labels
                        .iter()
                        .zip(&self.state.proposal.probs)
                        .any(|(l, q)| l.is_none() && *q > 0.0)
            }
        }
    }

    fn census_labels(&self) -> Option<Vec<usize>> {
        if self.state.config.oracle != OracleMode::Deterministic || self.budget_consumed() < self.ctx.n_items() {
            return None;
        }
        self.state.labels.iter().copied().collect()
    }

    /// `Ĝ` for the run's measure. Once every item is labelled under a
    /// deterministic oracle the report is the exact census value.
    pub fn estimate(&self) -> Result<EstimateReport> {
        self.estimate_measure(&self.ctx.measure)
    }

    /// Reuses the history for another measure on the same pool, after
    /// checking that every logged proposal covered its support.
    pub fn estimate_reuse(&self, measure: &Measure) -> Result<EstimateReport> {
        if measure.n_items() != self.ctx.n_items() {
            return Err(Error::InvalidPool("measure is bound to a different pool".into()));
        }
        if !self.state.config.log_support {
            return Err(Error::State("support log disabled; cannot audit reuse".into()));
        }
        self.state.history.audit_support(measure)?;
        self.estimate_measure(measure)
    }

    fn estimate_measure(&self, measure: &Measure) -> Result<EstimateReport> {
        let census = self.census_labels();
        let options = EstimateOptions {
            alpha: self.state.config.alpha,
            latest_proposal: Some(&self.state.proposal.probs),
            marginal: &self.ctx.marginal,
            census_labels: census.as_deref(),
            budget_consumed: self.budget_consumed(),
        };
        estimate_g(measure, self.state.history.records(), &options)
    }

    pub fn kl_to(&self, q_star: &Proposal) -> f64 {
        kl_to_optimal(&self.state.proposal, q_star)
    }
}

fn build_adaptive(ctx: &EvalContext, state: &SamplerState, t: usize) -> Result<Proposal> {
    let cfg = &state.config;
    let q = match &state.model {
        ModelState::Tree(model) => {
            let probs = model.block_posteriors();
            let dist = LabelDist::Blocked {
                block_of: ctx.partition.block_map(),
                probs: &probs,
                observed: model.labels(),
            };
            let r_hat = plugin_risk(&ctx.table, &ctx.marginal, dist);
            let eps = EpsilonSchedule::DetFractionUnobserved.value(cfg.epsilon0, model.fraction_observed(), t);
            match adapted_proposal_det(&ctx.measure, &ctx.table, &ctx.marginal, dist, &r_hat, eps, t) {
                Ok(q) => q,
                // fully observed pool with zero loss everywhere: any q is exact
                Err(Error::DegenerateProposal | Error::UndefinedMeasure) if eps == 0.0 => {
                    let mut q = Proposal::marginal(&ctx.marginal);
                    q.stage = t;
                    q
                }
                Err(e) => return Err(e),
            }
        }
        ModelState::Stochastic(model) => {
            let probs = model.posterior_predictives();
            let dist = LabelDist::Blocked {
                block_of: ctx.partition.block_map(),
                probs: &probs,
                observed: &[],
            };
            let r_hat = plugin_risk(&ctx.table, &ctx.marginal, dist);
            let eps = EpsilonSchedule::StochInverseT.value(cfg.epsilon0, 0.0, t);
            adapted_proposal_stoch(&ctx.measure, &ctx.table, &ctx.marginal, dist, &r_hat, eps, t)?
        }
        ModelState::None => return Err(Error::State("adaptive rule without a model".into())),
    };
    mix_with_marginal(&q, cfg.delta, &ctx.marginal)
}

/// `q₀` from the classifier scores used as `p̂(y|x)`, floored at `ε₀`.
pub fn static_proposal(ctx: &EvalContext, epsilon0: f64, delta: f64) -> Result<Proposal> {
    let preds = ctx.measure.predictions();
    let c = preds.n_classes();
    let mut scores = Vec::with_capacity(preds.len() * c);
    for i in 0..preds.len() {
        scores.extend_from_slice(preds.score_row(i));
    }
    let dist = LabelDist::PerItem(&scores);
    let r_hat = plugin_risk(&ctx.table, &ctx.marginal, dist);
    let q = adapted_proposal_stoch(&ctx.measure, &ctx.table, &ctx.marginal, dist, &r_hat, epsilon0, 0)?;
    mix_with_marginal(&q, delta, &ctx.marginal)
}

/// `N` i.i.d. draws from the pool marginal, `Ĝ = g(mean ℓ)`.
pub fn passive_estimate<O: Oracle + ?Sized, R: RngCore + ?Sized>(
    ctx: &EvalContext,
    oracle: &mut O,
    n: usize,
    rng: &mut R,
) -> Result<EstimateReport> {
    let config = SamplerConfig {
        rule: ProposalRule::Passive,
        log_support: false,
        ..SamplerConfig::default()
    };
    let mut sampler = AisSampler::new(ctx.clone(), config)?;
    sampler.run_draws(oracle, rng, n)?;
    sampler.estimate()
}

/// Single-stage importance sampling from the score-based proposal.
pub fn static_is_estimate<O: Oracle + ?Sized, R: RngCore + ?Sized>(
    ctx: &EvalContext,
    oracle: &mut O,
    n: usize,
    epsilon0: f64,
    rng: &mut R,
) -> Result<EstimateReport> {
    let config = SamplerConfig {
        rule: ProposalRule::Static,
        epsilon0,
        log_support: false,
        ..SamplerConfig::default()
    };
    let mut sampler = AisSampler::new(ctx.clone(), config)?;
    sampler.run_draws(oracle, rng, n)?;
    sampler.estimate()
}

/// Online stratified sampling with proportional allocation: each draw
/// picks a stratum with probability proportional to its mass, then an item
/// within it.
#[derive(Clone, Debug)]
pub struct StratifiedSampler {
    ctx: EvalContext,
    alpha: f64,
    strata: Vec<Vec<usize>>,
    within: Vec<Option<AliasTable>>,
    chooser: AliasTable,
    mass: Vec<f64>,
    counts: Vec<usize>,
    sums: Vec<f64>,
    squares: Vec<f64>,
    labels: Vec<Option<usize>>,
    budget: usize,
    draws: usize,
}

impl StratifiedSampler {
    pub fn new(ctx: EvalContext, alpha: f64) -> Result<Self> {
        let k = ctx.partition.n_blocks();
        let d = ctx.measure.loss_dim();
        let strata: Vec<Vec<usize>> = (0..k).map(|b| ctx.partition.members(b)).collect();
        let mass: Vec<f64> = strata.iter().map(|s| s.iter().map(|&i| ctx.marginal[i]).sum()).collect();
        let within = strata
            .iter()
            .map(|s| {
                if s.is_empty() {
                    None
                } else {
                    AliasTable::new(&s.iter().map(|&i| ctx.marginal[i]).collect::<Vec<_>>()).ok()
                }
            })
            .collect();
        let chooser = AliasTable::new(&mass)?;
        let m = ctx.n_items();
        Ok(Self {
            alpha,
            within,
            chooser,
            counts: vec![0; k],
            sums: vec![0.0; k * d],
            squares: vec![0.0; k * d * d],
            labels: vec![None; m],
            budget: 0,
            draws: 0,
            mass,
            strata,
            ctx,
        })
    }

    pub fn budget_consumed(&self) -> usize {
        self.budget
    }

    pub fn n_draws(&self) -> usize {
        self.draws
    }

    pub fn step<O: Oracle + ?Sized, R: RngCore + ?Sized>(&mut self, oracle: &mut O, rng: &mut R) -> Result<()> {
        let k = self.chooser.sample(rng);
        let table = self.within[k].as_ref().ok_or(Error::State("empty stratum chosen".into()))?;
        let item = self.strata[k][table.sample(rng)];
        let label = match self.labels[item] {
            Some(y) => y,
            None => {
                let y = oracle.query(item)?;
                let c = self.ctx.measure.n_classes();
                if y >= c {
                    return Err(Error::LabelOutOfRange { label: y, classes: c });
                }
                self.labels[item] = Some(y);
                self.budget += 1;
                y
            }
        };
        let d = self.ctx.measure.loss_dim();
        let loss = self.ctx.table.loss(item, label);
        for a in 0..d {
            self.sums[k * d + a] += loss[a];
            if loss[a] != 0.0 {
                for b in 0..d {
                    self.squares[(k * d + a) * d + b] += loss[a] * loss[b];
                }
            }
        }
        self.counts[k] += 1;
        self.draws += 1;
        Ok(())
    }

    pub fn run_until_budget<O: Oracle + ?Sized, R: RngCore + ?Sized>(
        &mut self,
        oracle: &mut O,
        rng: &mut R,
        budget: usize,
    ) -> Result<()> {
        if budget > self.ctx.n_items() {
            return Err(Error::Config("budget exceeds pool size".into()));
        }
        while self.budget < budget {
            self.step(oracle, rng)?;
        }
        Ok(())
    }

    pub fn run_draws<O: Oracle + ?Sized, R: RngCore + ?Sized>(&mut self, oracle: &mut O, rng: &mut R, n: usize) -> Result<()> {
        for _ in 0..n {
            self.step(oracle, rng)?;
        }
        Ok(())
    }

    /// Stratum-mass-weighted mean of per-stratum mean losses, renormalized
    /// over strata that have been sampled.
    pub fn estimate(&self) -> Result<EstimateReport> {
        if self.draws == 0 {
            return Err(Error::EmptyInput("history"));
        }
        let d = self.ctx.measure.loss_dim();
        let covered: f64 = (0..self.counts.len()).filter(|&k| self.counts[k] > 0).map(|k| self.mass[k]).sum();
        let mut r_hat = vec![0.0; d];
        let mut v = Matrix::zeros(d, d);
        for k in 0..self.counts.len() {
            let n = self.counts[k];
            if n == 0 {
                continue;
            }
            let w = self.mass[k] / covered;
            let nf = n as f64;
            for a in 0..d {
                r_hat[a] += w * self.sums[k * d + a] / nf;
            }
            // per-stratum covariance of the mean, scaled by N below
            for a in 0..d {
                let ma = self.sums[k * d + a] / nf;
                for b in 0..d {
                    let mb = self.sums[k * d + b] / nf;
                    let s = self.squares[(k * d + a) * d + b] / nf - ma * mb;
                    v.add_to(a, b, w * w * s / nf);
                }
            }
        }
        let g_hat = self.ctx.measure.map(&r_hat);
        let undefined = g_hat.iter().any(Option::is_none);
        let n = self.draws;
        let m = self.ctx.measure.out_dim();
        let (covariance, confidence) = if !undefined && n > m {
            let jac = self.ctx.measure.jacobian(&r_hat)?;
            let mut cov = jac.sandwich(&v);
            for i in 0..m {
                for j in 0..m {
                    cov.set(i, j, cov.get(i, j) * n as f64);
                }
            }
            let region = crate::estimate::confidence_region(&g_hat, &cov, n, self.alpha)?;
            (Some(cov), Some(region))
        } else {
            (None, None)
        };
        Ok(EstimateReport {
            measure: self.ctx.measure.name(),
            g_hat,
            undefined,
            r_hat,
            covariance,
            confidence,
            n_samples: n,
            budget_consumed: self.budget,
            census: false,
        })
    }
}

/// Bernoulli-style helper for stochastic oracles: draws a label from a pmf.
pub fn sample_label<R: RngCore + ?Sized>(pmf: &[f64], rng: &mut R) -> usize {
    let u = uniform01(rng);
    let mut acc = 0.0;
    for (y, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return y;
        }
    }
    pmf.len() - 1
}

/// Exact pool value `G` and risk `R` under known labels.
pub fn exact_measure(ctx: &EvalContext, labels: &[usize]) -> (Vec<f64>, Vec<Option<f64>>) {
    crate::measures::pool_measure(&ctx.measure, labels, &ctx.marginal)
}
