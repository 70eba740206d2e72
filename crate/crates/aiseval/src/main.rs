use std::fs;
use std::io::BufReader;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aiseval::core::estimate::DEFAULT_ALPHA;
use aiseval::core::measures::MeasureSpec;
use aiseval::experiment::{export_results, run_experiment, ExperimentConfig};
use aiseval::formats::{read_history, replay_estimate, report_to_json};
use aiseval::ingest::{exact_measure, load_pool, save_pool};
use aiseval::service::{serve, Service};
use aiseval::synthetic::{generate_synthetic_pool, SyntheticPoolSpec};
use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aiseval", version, about = "Label-efficient classifier evaluation by adaptive importance sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a method × budget × repeat grid from a TOML or JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `base_seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pool utilities.
    Pool {
        #[command(subcommand)]
        command: PoolCommand,
    },
    /// Recompute an estimate from an exported history.
    Estimate {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Measure spec as JSON, e.g. '{"name":"f1"}'; defaults to the
        /// history's own.
        #[arg(long)]
        measure: Option<String>,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the labelling API.
    Serve {
        /// Holds `pools/` and `sessions/`.
        #[arg(long, default_value = "aiseval-data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Extra pools as `id=path`.
        #[arg(long = "pool", value_name = "ID=PATH")]
        pools: Vec<String>,
    },
}

#[derive(Subcommand)]
enum PoolCommand {
    /// Generate a synthetic imbalanced pool (JSON or CSV by extension).
    Gen {
        #[arg(long, default_value_t = 10_000)]
        size: usize,
        /// Negatives per positive.
        #[arg(long, default_value_t = 100.0)]
        imbalance: f64,
        #[arg(long, default_value_t = 2.0)]
        quality: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a pool; with `--measure`, also its exact value.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        measure: Option<String>,
    },
}

fn parse_measure(text: &str) -> anyhow::Result<MeasureSpec> {
    serde_json::from_str(text).with_context(|| format!("bad measure spec `{text}`"))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            workers,
            out,
        } => run(&config, seed, workers, out),
        Command::Pool {
            command: PoolCommand::Gen {
                size,
                imbalance,
                quality,
                seed,
                out,
            },
        } => {
            let spec = SyntheticPoolSpec {
                size,
                imbalance,
                quality,
                seed,
            };
            let pool = generate_synthetic_pool(&spec)?;
            save_pool(&pool, &out)?;
            println!("wrote {} items to {}", pool.len(), out.display());
            Ok(())
        }
        Command::Pool {
            command: PoolCommand::Inspect { path, measure },
        } => inspect(&path, measure.as_deref()),
        Command::Estimate {
            history,
            pool,
            measure,
            alpha,
            out,
        } => {
            let file = fs::File::open(&history).with_context(|| format!("opening {}", history.display()))?;
            let history = read_history(BufReader::new(file))?;
            let spec = match (measure, &history.measure) {
                (Some(text), _) => parse_measure(&text)?,
                (None, Some(spec)) => spec.clone(),
                (None, None) => bail!("history names no measure; pass --measure"),
            };
            let pool = load_pool(&pool)?;
            let measure = spec.build(Arc::new(pool.predictions()))?;
            let report = replay_estimate(&history, &measure, &pool.marginal_vec(), alpha)?;
            let json = report_to_json(&report)?;
            match out {
                Some(path) => fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Serve {
            data_dir,
            bind,
            port,
            pools,
        } => {
            let (service, skipped) = Service::open(&data_dir)?;
            for s in skipped {
                eprintln!("skipped session {s}");
            }
            for arg in pools {
                let Some((id, path)) = arg.split_once('=') else {
                    bail!("--pool expects ID=PATH, got `{arg}`");
                };
                service.register_pool(id, load_pool(Path::new(path))?);
            }
            let addr = SocketAddr::new(bind, port);
            let pools: Vec<String> = service.pools().into_iter().map(|p| p.pool_id).collect();
            eprintln!("serving on http://{addr} (pools: {})", pools.join(", "));
            tokio::runtime::Runtime::new()?.block_on(serve(Arc::new(service), addr))?;
            Ok(())
        }
    }
}

fn run(config: &Path, seed: Option<u64>, workers: Option<usize>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    if workers.is_some() {
        cfg.workers = workers;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    let results = run_experiment(&cfg)?;
    println!("{:<18} {:>7} {:>12} {:>12} {:>12} {:>9} {:>6}", "method", "budget", "mse", "lo", "hi", "kl", "failed");
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4e}"));
    for c in &results.curves {
        for p in &c.points {
            println!(
                "{:<18} {:>7} {:>12} {:>12} {:>12} {:>9} {:>6}",
                c.method.name(),
                p.budget,
                fmt(p.mse),
                fmt(p.lo),
                fmt(p.hi),
                p.mean_kl.map_or("-".to_string(), |v| format!("{v:.4}")),
                p.n_failed
            );
        }
    }
    if let Some(dir) = &cfg.output_dir {
        let files = export_results(&results, dir)?;
        eprintln!("wrote {} files to {}", files.len(), dir.display());
    }
    Ok(())
}

fn inspect(path: &Path, measure: Option<&str>) -> anyhow::Result<()> {
    let pool = load_pool(path)?;
    println!("items      {}", pool.len());
    println!("classes    {}", pool.n_classes());
    println!("marginal   {}", if pool.has_uniform_marginal() { "uniform" } else { "weighted" });
    let labelled = pool.items().iter().filter(|it| it.true_label.is_some()).count();
    println!("labelled   {labelled}");
    let mut counts = vec![0usize; pool.n_classes()];
    for it in pool.items() {
        if let Some(y) = it.true_label {
            if y < counts.len() {
                counts[y] += 1;
            }
        }
    }
    if labelled > 0 {
        let shares: Vec<String> = counts
            .iter()
            .enumerate()
            .map(|(y, &n)| format!("{y}:{n} ({:.2}%)", 100.0 * n as f64 / labelled as f64))
            .collect();
        println!("labels     {}", shares.join("  "));
    }
    let mut raw = pool.raw_scores();
    raw.sort_by(f64::total_cmp);
    let q = |f: f64| raw[((raw.len() - 1) as f64 * f).round() as usize];
    println!(
        "scores     min {:.4}  q25 {:.4}  median {:.4}  q75 {:.4}  max {:.4}",
        q(0.0),
        q(0.25),
        q(0.5),
        q(0.75),
        q(1.0)
    );
    if let Some(text) = measure {
        let spec = parse_measure(text)?;
        let m = spec.build(Arc::new(pool.predictions()))?;
        let exact = exact_measure(&pool, &spec, &m, String::new())?;
        let values: Vec<String> = exact.value.iter().map(|v| v.map_or("undefined".into(), |v| format!("{v:.6}"))).collect();
        println!("{:<10} {}", m.name(), values.join(" "));
    }
    Ok(())
}
