mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::benchmark_config_path;
use etmpc::sim::trial_seed;
use serde_json::Value;

fn etmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etmpc")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Shipped config with one line replaced.
fn variant(dir: &Path, from: &str, to: &str) -> PathBuf {
    let text = std::fs::read_to_string(benchmark_config_path()).unwrap();
    assert!(text.contains(from), "{from}");
    let path = dir.join("variant.cfg");
    std::fs::write(&path, text.replacen(from, to, 1)).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn certify_shipped_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = etmpc(&["certify", "--config", s(&benchmark_config_path()), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&dir.path().join("certificate.json"));
    let rho_max = doc["certificate"]["rho_max"].as_f64().unwrap();
    assert!((rho_max - 0.00058).abs() / 0.00058 < 0.15);
    assert_eq!(doc["schema_version"], "etmpc-certificate/1");
    assert_eq!(doc["effective_config"]["design"]["T"], 2.0);
    assert!(doc["synthesis"]["care_residual"].as_f64().unwrap() < 1e-9);
    // stdout carries the same document
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, doc);
}

#[test]
fn certify_flags_excess_disturbance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "rho = 0.00031", "rho = 0.001");
    let o = etmpc(&["certify", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    let doc = read_json(&dir.path().join("certificate.json"));
    assert_eq!(doc["certificate"]["first_failure"], "disturbance");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&etmpc(&["certify", "--config", "/nonexistent/cart.cfg"])), 1);
    assert_eq!(code(&etmpc(&["frobnicate"])), 1);
    assert_eq!(code(&etmpc(&[])), 1);
    let dir = tempfile::tempdir().unwrap();
    let o = etmpc(&[
        "simulate", "--config", s(&benchmark_config_path()), "--out", s(dir.path()), "--duration", "0",
    ]);
    assert_eq!(code(&o), 1);
    let cfg = variant(dir.path(), "trials = 20", "trials = 20\ncolour = \"red\"");
    let o = etmpc(&["certify", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line") && err.contains("colour"), "{err}");
}

#[test]
fn simulate_respects_interval_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let o = etmpc(&["simulate", "--config", s(&benchmark_config_path()), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&dir.path().join("events.json"));
    let min = doc["metrics"]["min_interval"].as_f64().unwrap();
    let floor = doc["bounds"]["min_interval"].as_f64().unwrap();
    let beta_eff = doc["bounds"]["beta_eff"].as_f64().unwrap();
    assert!((floor - (beta_eff * 2.0 - 0.01)).abs() < 1e-12);
    assert!(min >= floor);
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,x1,x2,u1,w1,w2,err_P,accum,event");
    assert_eq!(csv.lines().count(), 1 + 1401);
    assert!(dir.path().join("plot/x1.dat").exists());
}

#[test]
fn infeasible_start_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "x0 = [0.6, -0.4]", "x0 = [5.0, 5.0]");
    let o = etmpc(&["simulate", "--config", s(&cfg), "--out", s(dir.path()), "--exploratory"]);
    assert_eq!(code(&o), 3);
    let doc = read_json(&dir.path().join("events.json"));
    assert_eq!(doc["status"], "feasibility_violated");
    assert_eq!(doc["events"][0]["status"], "infeasible");
    let what = doc["events"][0]["worst_constraint"].as_str().unwrap();
    assert!(what.contains("node 0"), "{what}");
}

#[test]
fn uncertified_simulation_needs_exploratory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "rho = 0.00031", "rho = 0.001");
    let o = etmpc(&["simulate", "--config", s(&cfg), "--out", s(dir.path()), "--duration", "2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = benchmark_config_path();
    let args = ["simulate", "--config", s(&cfg), "--out", s(dir.path()), "--seed", "99"];
    assert_eq!(code(&etmpc(&args)), 0);
    let first = (
        std::fs::read(dir.path().join("trace.csv")).unwrap(),
        std::fs::read(dir.path().join("events.json")).unwrap(),
    );
    assert_eq!(code(&etmpc(&args)), 0);
    assert_eq!(first.0, std::fs::read(dir.path().join("trace.csv")).unwrap());
    assert_eq!(first.1, std::fs::read(dir.path().join("events.json")).unwrap());
}

#[test]
fn compare_writes_both_event_lists() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("benchmarks/cart_compare.cfg");
    let o = etmpc(&["compare", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&dir.path().join("compare.json"));
    assert_eq!(doc["effective_config"]["sim"]["x0"], serde_json::json!([0.3, -0.2]));
    for kind in ["integral", "pointwise"] {
        assert_eq!(doc[kind]["status"], "completed");
        assert!(!doc[kind]["events"].as_array().unwrap().is_empty());
        assert!(dir.path().join(format!("plot/{kind}_events.dat")).exists());
    }
}

#[test]
fn single_trial_matches_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let mc = dir.path().join("mc");
    let sim = dir.path().join("sim");
    let cfg = benchmark_config_path();
    let o = etmpc(&["montecarlo", "--config", s(&cfg), "--out", s(&mc), "--trials", "1", "--seed", "42"]);
    assert_eq!(code(&o), 0);
    let seed = trial_seed(42, 0).to_string();
    let o = etmpc(&["simulate", "--config", s(&cfg), "--out", s(&sim), "--seed", &seed]);
    assert_eq!(code(&o), 0);
    let report = read_json(&mc.join("montecarlo.json"));
    let trial = &report["trials"][0];
    assert_eq!(trial["seed"].as_u64().unwrap().to_string(), seed);
    let events = read_json(&sim.join("events.json"));
    assert_eq!(trial["integral"]["event_count"], events["metrics"]["event_count"]);
    assert_eq!(trial["integral"]["mean_interval"], events["metrics"]["mean_interval"]);
    assert_eq!(trial["integral"]["min_interval"], events["metrics"]["min_interval"]);
}

#[test]
fn monte_carlo_integral_uses_no_more_events() {
    let dir = tempfile::tempdir().unwrap();
    let o = etmpc(&[
        "montecarlo", "--config", s(&benchmark_config_path()), "--out", s(dir.path()), "--trials", "20",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&dir.path().join("montecarlo.json"));
    let i = doc["integral"]["mean_event_count"].as_f64().unwrap();
    let p = doc["pointwise"]["mean_event_count"].as_f64().unwrap();
    assert!(i <= p, "{i} > {p}");
    assert_eq!(doc["trials"].as_array().unwrap().len(), 20);
    let csv = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
}
