use std::path::Path;
use std::process::{Command, Output};

use rdm_core::harness::ExperimentConfig;

fn rdm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdm"))
        .args(args)
        .env("RDM_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

#[test]
fn simulate_writes_trajectory_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"kind": "dynamics", "steps": 20, "seed": 5}"#);
    let out = rdm(&["simulate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 21);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let echoed: ExperimentConfig = serde_json::from_value(summary["config"].clone()).unwrap();
    let original = ExperimentConfig::from_json(r#"{"kind": "dynamics", "steps": 20, "seed": 5}"#).unwrap();
    assert_eq!(echoed, original);
}

#[test]
fn zero_steps_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = rdm(&["align", "--set", "steps=0"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(rdm(&["simulate", "--config", missing.to_str().unwrap()], dir.path()).status.code(), Some(2));
    let cfg = write_config(dir.path(), r#"{"kind": "dynamics", "learning_rate": 1}"#);
    assert_eq!(rdm(&["simulate", "--config", &cfg], dir.path()).status.code(), Some(2));
    assert_eq!(rdm(&["filters", "--filter", "wavelet"], dir.path()).status.code(), Some(2));
    assert_eq!(rdm(&["align", "--set", "alpha=2"], dir.path()).status.code(), Some(2));
}

#[test]
fn verify_reports_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = rdm(&["verify", "--seed", "1", "--instances", "10"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("overall: pass"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert!(report["properties"].as_array().unwrap().len() >= 10);
}

#[test]
fn filters_prints_a_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let out = rdm(&["filters", "--filter", "sinkhorn:3:1", "--seed", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("HighPass"));
    assert!(dir.path().join("filter.csv").exists());
}
