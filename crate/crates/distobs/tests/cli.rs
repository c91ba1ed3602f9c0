mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::scenario_path;
use serde_json::Value;

fn distobs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distobs")).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn design_then_simulate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_path("sec8.json");
    let bank = dir.path().join("bank.json");
    let trace = dir.path().join("trace.csv");
    let summary = dir.path().join("summary.json");

    let out = distobs(&["design", arg(&sc), "--scheme", "c1", "--out", arg(&bank)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let design: Value = serde_json::from_str(&fs::read_to_string(&bank).unwrap()).unwrap();
    assert_eq!(design["format_version"], 1);
    assert_eq!(design["certified"], true);
    assert_eq!(design["observer"]["scheme"], "c1");

    let out = distobs(&["simulate", arg(&sc), arg(&bank), "--out", arg(&trace), "--summary", arg(&summary)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&trace).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("step,mode,x_1,x_2,x_3,xhat_1_1"), "{header}");
    assert!(header.ends_with("err_3,relerr_3"), "{header}");
    assert_eq!(csv.lines().count(), 1 + 81);

    let s: Value = serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    for node in s["nodes"].as_array().unwrap() {
        assert!(node["final_rel_error"].as_f64().unwrap() < 1e-6, "{node}");
    }
}

#[test]
fn check_reports_both_verdicts() {
    let out = distobs(&["check", arg(&scenario_path("remark1.json"))]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Condition 1: holds"), "{text}");
    assert!(text.contains("Condition 2: fails"), "{text}");
}

#[test]
fn infeasible_scheme_exits_with_two() {
    let out = distobs(&["design", arg(&scenario_path("remark1.json")), "--scheme", "c2"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_scenario_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"format_version": 1, "plant": {"a": [[1.0, 0.0]], "c": [[[1.0]]]}, "graph": {"nodes": 1, "edges": []}}"#).unwrap();
    let out = distobs(&["check", arg(&bad)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seeded_switching_runs_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_path("sec8_switching.json");
    let bank = dir.path().join("bank.json");
    assert_eq!(distobs(&["design", arg(&sc), "--scheme", "c1", "--out", arg(&bank)]).status.code(), Some(0));
    let runs: Vec<Vec<u8>> = (0..2).map(|_| distobs(&["simulate", arg(&sc), arg(&bank), "--seed", "7"]).stdout).collect();
    assert!(!runs[0].is_empty());
    assert_eq!(runs[0], runs[1]);
    let other = distobs(&["simulate", arg(&sc), arg(&bank), "--seed", "8"]).stdout;
    assert_ne!(runs[0], other);
}
