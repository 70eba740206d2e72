//! Method × budget × repeat experiment grids.
//!
//! Every repeat `r` seeds a ChaCha20 generator with `base_seed + r` and
//! gives each method its own stream, so results do not depend on worker
//! count or scheduling. Squared errors are taken against the exact pool
//! measure; MSE bands come from a percentile bootstrap over repeats.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aiseval_core::measures::{Measure, MeasureSpec};
use aiseval_core::model::EmOptions;
use aiseval_core::partition::{grid_block_edges, assign_blocks, Partition, PartitionTree, DEFAULT_HIST_BINS};
use aiseval_core::pool::TestPool;
use aiseval_core::proposal::{optimal_proposal, LabelDist, Proposal};
use aiseval_core::sampler::{AisSampler, EvalContext, LabelOracle, ProposalRule, SamplerConfig, StratifiedSampler};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{exact_measure, exact_measure_cached, load_pool};
use crate::synthetic::{generate_synthetic_pool, SyntheticPoolSpec};
use crate::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OursHierarchical,
    OursFlat,
    StaticIs,
    Passive,
    Stratified,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::OursHierarchical,
        Method::OursFlat,
        Method::StaticIs,
        Method::Passive,
        Method::Stratified,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::OursHierarchical => "ours-hierarchical",
            Method::OursFlat => "ours-flat",
            Method::StaticIs => "static-is",
            Method::Passive => "passive",
            Method::Stratified => "stratified",
        }
    }

    fn stream(self) -> u64 {
        Method::ALL.iter().position(|m| *m == self).unwrap() as u64
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolSource {
    File { path: PathBuf },
    Synthetic(SyntheticPoolSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    /// `K`; must equal `branching^depth`.
    pub blocks: usize,
    pub branching: usize,
    pub depth: usize,
    pub hist_bins: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            blocks: 64,
            branching: 2,
            depth: 6,
            hist_bins: DEFAULT_HIST_BINS,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branching.checked_pow(self.depth as u32) != Some(self.blocks) {
            return Err(Error::Config(format!(
                "partition blocks {} != branching {}^depth {}",
                self.blocks, self.branching, self.depth
            )));
        }
        Ok(())
    }
}

fn default_bootstrap() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

fn default_kl_window() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pool: PoolSource,
    pub measure: MeasureSpec,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default = "SamplerDefaults::epsilon0")]
    pub epsilon0: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "SamplerDefaults::stage_size")]
    pub stage_size: usize,
    #[serde(default)]
    pub em: EmOptions,
    pub budgets: Vec<usize>,
    pub repeats: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Execution details below stay out of exported results, which must
    /// not depend on where or how wide the run was.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_resamples: usize,
    /// Track KL to the optimal proposal at each budget.
    #[serde(default = "default_true")]
    pub kl: bool,
    /// Fraction of each budget over which per-stage KL is averaged; 0
    /// takes the proposal in effect at the checkpoint.
    #[serde(default = "default_kl_window")]
    pub kl_window: f64,
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
}

struct SamplerDefaults;

impl SamplerDefaults {
    fn epsilon0() -> f64 {
        SamplerConfig::default().epsilon0
    }

    fn stage_size() -> usize {
        SamplerConfig::default().stage_size
    }
}

impl ExperimentConfig {
    /// Reads a JSON or TOML config (by extension; TOML otherwise).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text)?,
        };
        // relative pool paths resolve against the config's directory
        if let PoolSource::File { path: pool } = &mut config.pool {
            if pool.is_relative() {
                if let Some(dir) = path.parent() {
                    *pool = dir.join(&*pool);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("methods listed twice".into()));
        }
        if self.budgets.is_empty() || self.budgets[0] == 0 {
            return Err(Error::Config("budgets must be positive".into()));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("budgets must be strictly ascending".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_window) {
            return Err(Error::Config("kl_window must lie in [0, 1]".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        self.partition.validate()?;
        self.sampler_config(ProposalRule::Adaptive).validate()?;
        Ok(())
    }

    pub fn sampler_config(&self, rule: ProposalRule) -> SamplerConfig {
        SamplerConfig {
            rule,
            epsilon0: self.epsilon0,
            delta: self.delta,
            stage_size: self.stage_size,
            em: self.em,
            log_support: false,
            ..SamplerConfig::default()
        }
    }
}

/// A loaded pool with everything the methods share.
pub struct Prepared {
    pub pool: TestPool,
    pub labels: Vec<usize>,
    pub hierarchical: EvalContext,
    pub flat: EvalContext,
    pub truth: Vec<Option<f64>>,
    pub truth_risk: Vec<f64>,
    pub optimal: Option<Proposal>,
    pub pool_hash: String,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let (pool, path) = match &config.pool {
        PoolSource::File { path } => (load_pool(path)?, Some(path.clone())),
        PoolSource::Synthetic(spec) => (generate_synthetic_pool(spec)?, None),
    };
    prepare_pool(config, pool, path.as_deref())
}

pub fn prepare_pool(config: &ExperimentConfig, pool: TestPool, path: Option<&Path>) -> Result<Prepared> {
    let labels = pool.true_labels()?;
    let predictions = Arc::new(pool.predictions());
    let measure = config.measure.build(predictions)?;
    let partition = build_partition(&pool, &measure, &config.partition)?;
    let exact = match path {
        Some(p) => exact_measure_cached(p, &pool, &config.measure, &measure)?,
        None => exact_measure(&pool, &config.measure, &measure, "synthetic".into())?,
    };
    let marginal = pool.marginal_vec();
    let flat_tree = PartitionTree::flat(partition.n_blocks())?;
    let flat_partition = Partition::new(flat_tree, partition.block_map().to_vec())?;
    let hierarchical = EvalContext::new(measure, partition, marginal)?;
    let flat = hierarchical.with_partition(flat_partition)?;
    let optimal = if config.kl {
        optimal_proposal(
            &hierarchical.measure,
            &hierarchical.table,
            &hierarchical.marginal,
            LabelDist::Labels(&labels),
            &exact.risk,
        )
        .ok()
    } else {
        None
    };
    Ok(Prepared {
        labels,
        hierarchical,
        flat,
        truth: exact.value,
        truth_risk: exact.risk,
        optimal,
        pool_hash: exact.pool_hash,
        pool,
    })
}

/// CSF strata on the raw scores; PR-curve measures instead align block
/// edges with every `L/K`-th threshold.
pub fn build_partition(pool: &TestPool, measure: &Measure, config: &PartitionConfig) -> Result<Partition> {
    let raw = pool.raw_scores();
    match measure.thresholds() {
        Some(thresholds) => {
            let l = thresholds.len();
            if config.blocks == 0 || l % config.blocks != 0 {
                return Err(Error::Config(format!(
                    "PR-curve grid of {l} thresholds is not a multiple of {} blocks",
                    config.blocks
                )));
            }
            let edges = grid_block_edges(thresholds, l / config.blocks)?;
            let tree = PartitionTree::new(config.blocks, config.branching, config.depth)?;
            Ok(Partition::new(tree, assign_blocks(&raw, &edges))?)
        }
        None => Ok(Partition::from_scores_csf(&raw, config.branching, config.depth, config.hist_bins)?),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub method: Method,
    pub repeat: usize,
    /// `Ĝ` per budget; `None` where undefined.
    pub estimates: Vec<Option<Vec<f64>>>,
    pub squared_errors: Vec<Option<f64>>,
    /// KL of the proposal in effect when each budget is reached.
    pub kl: Vec<Option<f64>>,
    pub draws: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: usize,
    pub mse: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_kl: Option<f64>,
    pub n_kl_infinite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: Method,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub pool_hash: String,
    pub truth: Vec<Option<f64>>,
    pub curves: Vec<MethodCurve>,
    pub repeats: Vec<RepeatResult>,
}

impl ExperimentResults {
    pub fn curve(&self, method: Method) -> Option<&MethodCurve> {
        self.curves.iter().find(|c| c.method == method)
    }

    pub fn repeats_of(&self, method: Method) -> impl Iterator<Item = &RepeatResult> {
        self.repeats.iter().filter(move |r| r.method == method)
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    config.validate()?;
    let prepared = prepare(config)?;
    run_prepared(config, &prepared)
}

pub fn run_prepared(config: &ExperimentConfig, prepared: &Prepared) -> Result<ExperimentResults> {
    let tasks: Vec<(Method, usize)> = config
        .methods
        .iter()
        .flat_map(|&m| (0..config.repeats).map(move |r| (m, r)))
        .collect();
    let run = || -> Vec<RepeatResult> {
        tasks
            .par_iter()
            .map(|&(method, repeat)| run_repeat(config, prepared, method, repeat))
            .collect()
    };
    let repeats = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    };
    let curves = config
        .methods
        .iter()
        .map(|&method| aggregate(config, method, repeats.iter().filter(|r| r.method == method)))
        .collect();
    Ok(ExperimentResults {
        config: config.clone(),
        pool_hash: prepared.pool_hash.clone(),
        truth: prepared.truth.clone(),
        curves,
        repeats,
    })
}

pub fn repeat_rng(base_seed: u64, repeat: usize, method: Method) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(base_seed.wrapping_add(repeat as u64));
    rng.set_stream(method.stream());
    rng
}

/// Runs one method once, checkpointing at each budget.
pub fn run_repeat(config: &ExperimentConfig, prepared: &Prepared, method: Method, repeat: usize) -> RepeatResult {
    let mut result = RepeatResult {
        method,
        repeat,
        estimates: Vec::new(),
        squared_errors: Vec::new(),
        kl: Vec::new(),
        draws: 0,
        error: None,
    };
    let mut rng = repeat_rng(config.base_seed, repeat, method);
    let mut oracle = LabelOracle(&prepared.labels);
    let outcome: Result<()> = (|| {
        if method == Method::Stratified {
            let mut sampler = StratifiedSampler::new(prepared.hierarchical.clone(), 0.05)?;
            for &b in &config.budgets {
                sampler.run_until_budget(&mut oracle, &mut rng, b)?;
                let report = sampler.estimate()?;
                push_estimate(&mut result, prepared, report.g_hat);
                result.kl.push(None);
            }
            result.draws = sampler.n_draws();
            return Ok(());
        }
        let (ctx, rule) = match method {
            Method::OursHierarchical => (&prepared.hierarchical, ProposalRule::Adaptive),
            Method::OursFlat => (&prepared.flat, ProposalRule::Adaptive),
            Method::StaticIs => (&prepared.hierarchical, ProposalRule::Static),
            Method::Passive => (&prepared.hierarchical, ProposalRule::Passive),
            Method::Stratified => unreachable!(),
        };
        let mut sampler = AisSampler::new(ctx.clone(), config.sampler_config(rule))?;
        let mut previous = 0;
        for &b in &config.budgets {
            match &prepared.optimal {
                Some(q_star) => {
                    // average KL over the stages in effect while the last
                    // `kl_window·b` labels were bought
                    let window = (config.kl_window * b as f64).ceil() as usize;
                    let start = b.saturating_sub(window).max(previous);
                    sampler.run_until_budget(&mut oracle, &mut rng, start)?;
                    let mut kls = vec![sampler.kl_to(q_star)];
                    sampler.run_until_budget_with(&mut oracle, &mut rng, b, |s| kls.push(s.kl_to(q_star)))?;
                    result.kl.push(Some(kls.iter().sum::<f64>() / kls.len() as f64));
                }
                None => {
                    sampler.run_until_budget(&mut oracle, &mut rng, b)?;
                    result.kl.push(None);
                }
            }
            let report = sampler.estimate()?;
            push_estimate(&mut result, prepared, report.g_hat);
            previous = b;
        }
        result.draws = sampler.history().len();
        Ok(())
    })();
    if let Err(e) = outcome {
        result.error = Some(e.to_string());
    }
    result
}

fn push_estimate(result: &mut RepeatResult, prepared: &Prepared, g_hat: Vec<Option<f64>>) {
    let se = squared_error(&g_hat, &prepared.truth);
    let estimate = g_hat.iter().copied().collect::<Option<Vec<f64>>>();
    result.estimates.push(estimate);
    result.squared_errors.push(se);
}

/// Mean squared error over the coordinates where the truth is defined;
/// `None` if the estimate is undefined on any of them.
pub fn squared_error(estimate: &[Option<f64>], truth: &[Option<f64>]) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (e, t) in estimate.iter().zip(truth) {
        if let Some(t) = t {
            let e = (*e)?;
            total += (e - t) * (e - t);
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}

fn aggregate<'a>(config: &ExperimentConfig, method: Method, repeats: impl Iterator<Item = &'a RepeatResult>) -> MethodCurve {
    let repeats: Vec<&RepeatResult> = repeats.collect();
    let points = config
        .budgets
        .iter()
        .enumerate()
        .map(|(b_idx, &budget)| {
            let errors: Vec<f64> = repeats
                .iter()
                .filter(|r| r.error.is_none())
                .filter_map(|r| r.squared_errors.get(b_idx).copied().flatten())
                .collect();
            let n_failed = repeats.len() - errors.len();
            let mut rng = ChaCha20Rng::seed_from_u64(config.base_seed ^ 0x5eed_b007);
            rng.set_stream(method.stream() * 1_000_003 + b_idx as u64);
            let (mse, lo, hi) = match mean(&errors) {
                None => (None, None, None),
                Some(m) => {
                    let (lo, hi) = bootstrap_band(&errors, config.bootstrap_resamples, &mut rng);
                    (Some(m), Some(lo), Some(hi))
                }
            };
            let kls: Vec<f64> = repeats
                .iter()
                .filter(|r| r.error.is_none())
                .filter_map(|r| r.kl.get(b_idx).copied().flatten())
                .collect();
            let finite: Vec<f64> = kls.iter().copied().filter(|k| k.is_finite()).collect();
            CurvePoint {
                budget,
                mse,
                lo,
                hi,
                n_ok: errors.len(),
                n_failed,
                mean_kl: mean(&finite),
                n_kl_infinite: kls.len() - finite.len(),
            }
        })
        .collect();
    MethodCurve { method, points }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Percentile bootstrap 95% band for the mean.
pub fn bootstrap_band<R: Rng>(xs: &[f64], resamples: usize, rng: &mut R) -> (f64, f64) {
    let n = xs.len();
    let point = xs.iter().sum::<f64>() / n as f64;
    if n < 2 || resamples == 0 {
        return (point, point);
    }
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

/// Writes `mse_<method>.csv`, `kl_<method>.csv` (where tracked),
/// `curves.dat` (gnuplot columns) and `summary.json`.
pub fn export_results(results: &ExperimentResults, dir: &Path) -> Result<Vec<PathBuf>> {
    if results.curves.is_empty() || results.repeats.is_empty() {
        return Err(Error::Config("nothing to export: results are empty".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_else(|| "nan".into());
    for curve in &results.curves {
        let path = dir.join(format!("mse_{}.csv", curve.method.name()));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["budget", "mse", "lo", "hi", "n_ok", "n_failed"])?;
        for p in &curve.points {
            w.write_record([
                p.budget.to_string(),
                fmt(p.mse),
                fmt(p.lo),
                fmt(p.hi),
                p.n_ok.to_string(),
                p.n_failed.to_string(),
            ])?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
        if curve.points.iter().any(|p| p.mean_kl.is_some() || p.n_kl_infinite > 0) {
            let path = dir.join(format!("kl_{}.csv", curve.method.name()));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["budget", "mean_kl", "n_infinite"])?;
            for p in &curve.points {
                w.write_record([p.budget.to_string(), fmt(p.mean_kl), p.n_kl_infinite.to_string()])?;
            }
            w.flush().map_err(io_err(&path))?;
            written.push(path);
        }
    }
    let dat = dir.join("curves.dat");
    let mut text = String::from("# budget");
    for c in &results.curves {
        text.push_str(&format!(" {}", c.method.name()));
    }
    text.push('\n');
    for (i, &b) in results.config.budgets.iter().enumerate() {
        text.push_str(&b.to_string());
        for c in &results.curves {
            text.push(' ');
            text.push_str(&fmt(c.points[i].mse));
        }
        text.push('\n');
    }
    fs::write(&dat, text).map_err(io_err(&dat))?;
    written.push(dat);
    let summary = dir.join("summary.json");
    #[derive(Serialize)]
    struct Summary<'a> {
        schema: &'static str,
        config: &'a ExperimentConfig,
        pool_hash: &'a str,
        truth: &'a [Option<f64>],
        curves: &'a [MethodCurve],
        failures: Vec<(&'static str, usize, &'a str)>,
    }
    let failures = results
        .repeats
        .iter()
        .filter_map(|r| r.error.as_deref().map(|e| (r.method.name(), r.repeat, e)))
        .collect();
    let doc = Summary {
        schema: "aiseval.experiment.v1",
        config: &results.config,
        pool_hash: &results.pool_hash,
        truth: &results.truth,
        curves: &results.curves,
        failures,
    };
    fs::write(&summary, serde_json::to_string_pretty(&doc)? + "\n").map_err(io_err(&summary))?;
    written.push(summary);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_error_skips_undefined_truth() {
        assert_eq!(squared_error(&[Some(0.5), None], &[Some(0.25), None]), Some(0.0625));
        assert_eq!(squared_error(&[None], &[Some(0.25)]), None);
    }

    #[test]
    fn single_repeat_band_is_degenerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert_eq!(bootstrap_band(&[0.3], 1000, &mut rng), (0.3, 0.3));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
    }
}
