use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use aiseval::core::partition::Partition;
use aiseval::core::sampler::{AisSampler, EvalContext, LabelOracle, OracleMode, SamplerConfig};
use aiseval::formats::{report_from_json, write_history, HistoryMeta};
use aiseval::ingest::load_pool;
use aiseval::core::measures::MeasureSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn aiseval(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_aiseval")).args(args).current_dir(cwd).output().unwrap();
    assert!(
        out.status.success(),
        "aiseval {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn generate_inspect_run_and_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    aiseval(
        &["pool", "gen", "--size", "2000", "--imbalance", "10", "--quality", "2", "--seed", "3", "--out", "pool.csv"],
        cwd,
    );
    let info = stdout(&aiseval(&["pool", "inspect", "pool.csv", "--measure", r#"{"name":"f1"}"#], cwd));
    assert!(info.contains("items      2000"), "{info}");
    assert!(info.contains("marginal   uniform"));
    assert!(info.lines().any(|l| l.starts_with("f1")));

    fs::write(
        cwd.join("run.toml"),
        r#"
            pool = { kind = "file", path = "pool.csv" }
            measure = { name = "f1" }
            methods = ["ours-hierarchical", "passive"]
            budgets = [50, 150]
            repeats = 4
            bootstrap_resamples = 100
            partition = { blocks = 8, branching = 2, depth = 3 }
        "#,
    )
    .unwrap();
    let table = stdout(&aiseval(&["run", "--config", "run.toml", "--seed", "9", "--out", "results"], cwd));
    assert!(table.lines().next().unwrap().starts_with("method"));
    assert_eq!(table.lines().filter(|l| l.starts_with("passive")).count(), 2);
    for f in ["mse_passive.csv", "mse_ours-hierarchical.csv", "kl_ours-hierarchical.csv", "curves.dat", "summary.json"] {
        assert!(cwd.join("results").join(f).exists(), "missing {f}");
    }

    // a history written by the library replays through the CLI
    let pool = load_pool(&cwd.join("pool.csv")).unwrap();
    let labels = pool.true_labels().unwrap();
    let measure = MeasureSpec::F1.build(Arc::new(pool.predictions())).unwrap();
    let partition = Partition::from_scores_csf(&pool.raw_scores(), 2, 3, 1024).unwrap();
    let ctx = EvalContext::new(measure, partition, pool.marginal_vec()).unwrap();
    let mut sampler = AisSampler::new(ctx, SamplerConfig::default()).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    sampler.run_until_budget(&mut LabelOracle(&labels), &mut rng, 100).unwrap();
    let mut history = Vec::new();
    let meta = HistoryMeta {
        measure: Some(&MeasureSpec::F1),
        seed: Some(1),
        oracle: Some(OracleMode::Deterministic),
        pool: Some(&pool),
    };
    write_history(&mut history, sampler.history(), &sampler.proposal().probs, &meta).unwrap();
    fs::write(cwd.join("run.jsonl"), history).unwrap();
    aiseval(&["estimate", "--history", "run.jsonl", "--pool", "pool.csv", "--out", "report.json"], cwd);
    let report = report_from_json(&fs::read_to_string(cwd.join("report.json")).unwrap()).unwrap();
    assert_eq!(report, sampler.estimate().unwrap());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_aiseval"))
        .args(["pool", "inspect", "missing.csv"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
    let out = Command::new(env!("CARGO_BIN_EXE_aiseval"))
        .args(["serve", "--pool", "no-equals-sign"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}
