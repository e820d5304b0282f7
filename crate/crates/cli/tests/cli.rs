use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn sweepctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sweepctl"))
        .args(args)
        .env("SWEEPCTL_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn simulate_succeeds_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweepctl(&["simulate", "--id", "play_stop", "--k", "100", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let report = stdout_json(&out);
    assert_eq!(report["verdict"]["feasible"], true);
    assert!(dir.path().join("trajectory.csv").exists());
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn degenerate_scenario_exits_with_code_two() {
    let out = sweepctl(&["simulate", "--id", "degenerate_2_3", "--k", "50"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["error"], "DiscontinuityDetected");
}

#[test]
fn unknown_id_is_a_configuration_error() {
    let out = sweepctl(&["simulate", "--id", "missing"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stdout_json(&out)["error"], "UnknownScenario");
}

#[test]
fn invalid_scenario_file_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "id = 3\n").unwrap();
    let out = sweepctl(&["simulate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_scenario_file_is_a_configuration_error() {
    let out = sweepctl(&["simulate", "--scenario", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stdout_json(&out)["error"], "Io");
}

#[test]
fn too_coarse_mesh_is_rejected() {
    let out = sweepctl(&["optimize", "--id", "ex7_3", "--k", "1"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn scenario_files_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ex7_6.json");
    let sc = sweep_core::scenarios::lookup("ex7_6").unwrap().scenario;
    fs::write(&path, serde_json::to_string(&sc).unwrap()).unwrap();
    let out = sweepctl(&["simulate", "--scenario", path.to_str().unwrap(), "--k", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(stdout_json(&out)["scenario"], "ex7_6");
}

#[test]
fn certify_reports_a_verdict() {
    let out = sweepctl(&["certify", "--id", "ex7_4", "--k", "10"]);
    assert!(out.status.success());
    let report = stdout_json(&out);
    assert_eq!(report["verdict"]["verdict"], "normal");
    assert!(report["verdict"]["max_residual"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn certify_checks_a_trajectory_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(sweepctl(&["simulate", "--id", "ex7_6", "--k", "10", "--out", d]).status.success());
    let traj = dir.path().join("trajectory.csv");
    let out = sweepctl(&["certify", "--id", "ex7_6", "--trajectory", traj.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(stdout_json(&out)["k"], 10);
}

#[test]
fn coderivative_check_agrees_everywhere() {
    let out = sweepctl(&["coderiv", "--id", "ex7_3", "--seed", "3"]);
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["verdict"]["agreement"], 1.0);
}

#[test]
fn convergence_rows_are_reported() {
    let out = sweepctl(&["convergence", "--id", "ex7_3"]);
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["details"].as_array().unwrap().len(), 4);
}

#[test]
fn examples_lists_the_registry() {
    let out = sweepctl(&["examples"]);
    assert!(out.status.success());
    assert!(stdout_json(&out).as_array().unwrap().len() >= 7);
}

#[test]
fn examples_batch_writes_one_directory_per_entry() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweepctl(&["examples", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let results = stdout_json(&out);
    for r in results.as_array().unwrap() {
        let id = r["id"].as_str().unwrap();
        if id == "degenerate_2_3" {
            assert_eq!(r["error"], "DiscontinuityDetected");
        } else {
            assert!(r.get("report").is_some(), "{id}: {r}");
            assert!(dir.path().join(id).join("report.json").exists(), "{id}");
        }
    }
}

#[test]
fn rerunning_a_command_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let args = ["optimize", "--id", "ex7_3", "--k", "50", "--seed", "5", "--out", d];
    assert!(sweepctl(&args).status.success());
    let first = fs::read(dir.path().join("report.json")).unwrap();
    let trace = fs::read(dir.path().join("trace.csv")).unwrap();
    assert!(sweepctl(&args).status.success());
    assert_eq!(first, fs::read(dir.path().join("report.json")).unwrap());
    assert_eq!(trace, fs::read(dir.path().join("trace.csv")).unwrap());
}
