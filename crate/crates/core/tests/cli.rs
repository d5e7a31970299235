use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gad_core::cli::{RunReport, VerifySummary};
use gad_core::problems::PROBLEM_IDS;
use serde_json::json;

fn gad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gad"))
        .args(args)
        .env("GAD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn list_prints_every_problem() {
    let out = gad(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for id in PROBLEM_IDS {
        assert!(text.lines().any(|l| l.trim() == id), "missing {id}");
    }
    assert!(text.contains("index2-real-deflated"));
}

#[test]
fn unknown_problem_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "problem": {"id": "no-such-problem"},
        "variant": "index1-general",
        "output_dir": dir.path(),
    });
    let path = write_json(dir.path(), "run.json", &cfg);
    let out = gad(&["run", &path]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-problem"));
}

#[test]
fn malformed_config_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"problem\": {\"id\": \"lorenz\"},\n  \"variant\": ,\n}\n").unwrap();
    let out = gad(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:3:"), "{err}");
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "problem": {"id": "lorenz"},
        "variant": "index1-general",
        "run": {"dt": 1e-3, "step_size": 2},
    });
    let path = write_json(dir.path(), "run.json", &cfg);
    let out = gad(&["run", &path]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step_size"));
}

#[test]
fn step_budget_exhaustion_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "problem": {"id": "lorenz"},
        "variant": "index1-general",
        "x0": [-1.0, 2.0, 5.0],
        "run": {"max_steps": 1},
        "output_dir": dir.path(),
    });
    let path = write_json(dir.path(), "run.json", &cfg);
    let out = gad(&["run", &path]);
    assert_eq!(out.status.code(), Some(2));
    let report: RunReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(!report.report.converged);
    assert_eq!(report.report.steps, 1);
}

#[test]
fn lorenz_run_converges_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "problem": {"id": "lorenz"},
        "variant": {"kind": "index1-general", "tau": 1.0},
        "x0": [-1.0, 2.0, 5.0],
        "run": {"dt": 1e-3, "stepper": "rk4", "tol_force": 1e-8, "tol_rhs": 1e-8, "record_every": 100},
        "output_dir": dir.path().join("out"),
    });
    let path = write_json(dir.path(), "run.json", &cfg);
    let out = gad(&["run", &path]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let text = fs::read_to_string(dir.path().join("out/report.json")).unwrap();
    let report: RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.problem_id, "lorenz");
    assert!(report.report.converged);
    assert!(report.report.x_star.iter().all(|c| c.abs() < 1e-6));
    let oracle = 0.5 * (-11.0 + 1281f64.sqrt());
    assert!((report.report.lambda_star.unwrap() - oracle).abs() < 1e-6);
    // Round trip through serde keeps every field.
    let again: RunReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(again.report.x_star, report.report.x_star);
    assert_eq!(again.report.steps, report.report.steps);

    let csv = fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("t,x_0,x_1,x_2,v1_0"));
    assert!(header.ends_with("force_norm,alpha,beta,drift"));
    let cols = header.split(',').count();
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() > 2);
    assert!(rows.iter().all(|r| r.split(',').count() == cols));
}

#[test]
fn scan_writes_basin_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "problem": {"id": "double-well", "params": {"mu": 1.0}},
        "variant": "index1-reduced-tau0",
        "run": {"dt": 0.05, "max_steps": 1500, "blowup_norm": 1e3},
        "grid": {"x_min": -1.5, "x_max": 1.5, "y_min": -1.0, "y_max": 1.0, "nx": 12, "ny": 6},
        "output_dir": dir.path(),
    });
    let path = write_json(dir.path(), "scan.json", &cfg);
    let out = gad(&["scan", &path]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("basin.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,y,label,steps"));
    assert_eq!(lines.count(), 72);
}

#[test]
fn newton_scan_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "problem": {"id": "double-well", "params": {"mu": 3.0}},
        "method": "newton",
        "grid": {"x_min": -1.5, "x_max": 1.5, "y_min": -1.0, "y_max": 1.0, "nx": 10, "ny": 10},
        "output_dir": dir.path(),
    });
    let path = write_json(dir.path(), "scan.json", &cfg);
    let out = gad(&["scan", &path]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("basin.csv")).unwrap().lines().count(), 101);
}

#[test]
fn verify_small_battery_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = gad(&["verify", "--n-random", "8", "--seed", "3", "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let summary: VerifySummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert!(summary.all_pass);
    assert_eq!(summary.n_random, 8);
    assert!(summary.properties.len() >= 4);
}

#[test]
fn bad_thread_count_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_gad"))
        .arg("list")
        .env("GAD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
