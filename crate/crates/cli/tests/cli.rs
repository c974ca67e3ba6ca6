use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vecsim::env_engine::{read_metrics_csv, read_trace_csv};
use vecsim::verify::VerifyReport;
use vecsim_cli::read_sweep_csv;

const SMALL: &str = r#"
num_edges = 2
edge_grid = [1, 2]
area_side_m = 1500.0
horizon_slots = 6
num_vehicles = 14
rng_seed = 3
"#;

fn vecsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vecsim"))
        .args(args)
        .env("VECSIM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_readable_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = vecsim(&["run", "--config", &cfg, "--policy", "game", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("policy game seed 7"), "{stdout}");

    let metrics = fs::read_to_string(out.join("game_seed7_metrics.csv")).unwrap();
    let (outcomes, summary) = read_metrics_csv(&metrics).unwrap();
    assert_eq!(outcomes.len(), 6);
    assert_eq!(summary.slots, 6);
    let trace = fs::read_to_string(out.join("game_seed7_dynamics.csv")).unwrap();
    read_trace_csv(&trace).unwrap();
}

#[test]
fn orl_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let read = |sub: &str| {
        let out = dir.path().join(sub);
        let o = vecsim(&["run", "--config", &cfg, "--policy", "orl", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        fs::read(out.join("orl_seed3_metrics.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn misuse_exits_with_two() {
    let o = vecsim(&["run", "--policy", "greedy"]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert!(stderr.contains("unknown policy `greedy`") && stderr.contains("Usage:"), "{stderr}");

    assert_eq!(vecsim(&["sweep", "--axis", "arrival_prob", "--values", ""]).status.code(), Some(2));
    assert_eq!(vecsim(&["sweep", "--axis", "arrival_prob"]).status.code(), Some(2));
    assert_eq!(vecsim(&["sweep", "--axis", "speed", "--values", "1"]).status.code(), Some(2));
    assert_eq!(vecsim(&["verify", "--suite", "fast"]).status.code(), Some(2));
}

#[test]
fn sweep_counts_episodes_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep.csv");
    let o = vecsim(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "arrival_prob",
        "--values",
        "0.3,0.4,0.5,0.6,0.7",
        "--seeds",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("60 episodes"));
    let text = fs::read_to_string(&out).unwrap();
    let rows = read_sweep_csv(&text).unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.seeds == 3));
    assert_eq!(vecsim_cli::write_sweep_csv(&rows).unwrap(), text);
}

#[test]
fn cpu_sweep_rejects_inverted_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("cpu.csv");
    let o = vecsim(&["sweep", "--config", &cfg, "--axis", "cpu_range", "--values", "1,12", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().contains("range inverted"));
}

#[test]
fn verify_reports_json() {
    let o = vecsim(&["verify", "--suite", "dynamics", "--seed", "2"]);
    assert!(o.status.success());
    let report: VerifyReport = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report.passed);
    assert!(report.checks.iter().any(|c| c.name == "endpoint_is_equilibrium"));
}

#[test]
fn serve_over_stdio() {
    use std::io::Write;
    use std::process::Stdio;

    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_vecsim"))
        .args(["serve", "--config", &cfg])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let zeros = serde_json::json!([vec![0.0; 20], vec![0.0; 20]]);
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, r#"{{"kind":"reset"}}"#).unwrap();
    writeln!(stdin, "{}", serde_json::json!({"kind": "step", "actions": zeros})).unwrap();
    writeln!(stdin, r#"{{"kind":"close"}}"#).unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["kind"], "reset_ok");
    assert_eq!(lines[0]["version"], "1");
    assert_eq!(lines[1]["kind"], "step_ok");
    assert_eq!(lines[2]["kind"], "close");
}
