use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SYNTH: &str = r#"{"single": {"n": 20000, "k_true": 5, "p": [0.01, 0.02, 0.05, 0.1, 0.3],
    "mu": [1, 1.1, 1.2, 1.3, 1.4], "sigma": [1, 1, 1, 1, 1], "proxy_noise": 0.01, "seed": 4}}"#;

const DATA: [&str; 6] = [
    "--data",
    "data.csv",
    "--label-col",
    "pred=label_pred",
    "--proxy-col",
    "pred=proxy_pred",
];

fn abae(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abae"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run abae")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("synth.json"), SYNTH).unwrap();
    let summary = json(&abae(
        &["synth", "--spec", "synth.json", "--out", "data.csv"],
        dir.path(),
    ));
    assert_eq!(summary["records"], 20000);
    dir
}

#[test]
fn run_reports_estimate_within_budget() {
    let dir = workspace();
    let args: Vec<&str> = [
        "run",
        "--budget",
        "2000",
        "--bootstrap",
        "100",
        "--seed",
        "1",
    ]
    .into_iter()
    .chain(DATA)
    .collect();
    let report = json(&abae(&args, dir.path()));
    let estimate = report["estimate"].as_f64().unwrap();
    assert!(report["ci_low"].as_f64().unwrap() <= estimate);
    assert!(estimate <= report["ci_high"].as_f64().unwrap());
    assert!(report["oracle_calls"].as_u64().unwrap() <= 2000);
    assert_eq!(report["aggregate"], "avg");
}

#[test]
fn count_with_explicit_predicate() {
    let dir = workspace();
    let args: Vec<&str> = [
        "run",
        "--where",
        "pred",
        "--aggregate",
        "count",
        "--budget",
        "2000",
        "--bootstrap",
        "50",
    ]
    .into_iter()
    .chain(DATA)
    .collect();
    let report = json(&abae(&args, dir.path()));
    assert_eq!(report["aggregate"], "count");
    assert!(report["estimate"].as_f64().unwrap() > 0.0);
}

#[test]
fn select_proxy_ranks_the_only_candidate() {
    let dir = workspace();
    let args: Vec<&str> = ["select-proxy", "--budget", "2000"]
        .into_iter()
        .chain(DATA)
        .collect();
    let out = json(&abae(&args, dir.path()));
    assert_eq!(out["best"], "pred");
    assert_eq!(out["pilot_size"], 1000);
}

#[test]
fn bad_input_exits_with_code_two() {
    let dir = workspace();
    let missing = abae(
        &["run", "--data", "missing.csv", "--budget", "100"],
        dir.path(),
    );
    assert_eq!(missing.status.code(), Some(2));
    let args: Vec<&str> = ["run", "--where", "pred AND (", "--budget", "100"]
        .into_iter()
        .chain(DATA)
        .collect();
    let unparsable = abae(&args, dir.path());
    assert_eq!(unparsable.status.code(), Some(2));
    assert!(!unparsable.stderr.is_empty());
}

#[test]
fn bench_exits_with_code_one_on_failed_check() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bench.json"),
        r#"{"dataset": {"synth": {"n": 10000, "k_true": 5, "p": [0.01, 0.02, 0.05, 0.1, 0.3],
            "mu": [1, 1.1, 1.2, 1.3, 1.4], "sigma": [1, 1, 1, 1, 1], "proxy_noise": 0.01}},
            "methods": ["abae"], "budgets": [1000], "trials": 10, "bootstrap_trials": 50, "seed": 2,
            "checks": [{"kind": "coverage", "method": "abae", "min": 1.5, "max": 2.0}]}"#,
    )
    .unwrap();
    let out = abae(
        &["bench", "--spec", "bench.json", "--out", "metrics.csv"],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}
