use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fogalloc::channel::generate_scenario;
use fogalloc::config::Config;
use fogalloc::two_step::local_baseline;
use fogalloc::Reliability;

fn fogalloc(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fogalloc"));
    cmd.args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn local_solve_matches_closed_form() {
    let out = fogalloc(&["solve", "--method", "local", "--seed", "5"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0]["method"], "local");

    let cfg = Config::default();
    let s = generate_scenario(&cfg.system, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let expected = local_baseline(&s, Reliability::new(0.95).unwrap()).unwrap().expected_energy;
    assert_eq!(reports[0]["expected_energy"].as_f64().unwrap(), expected);
}

#[test]
fn both_methods_share_the_scenario() {
    let out = fogalloc(&["solve", "--method", "both", "--seed", "3"], None);
    assert!(out.status.success());
    let v = json(&out);
    let reports = v["reports"].as_array().unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(names, ["local", "dc", "two-step"]);
    let bits = |r: &serde_json::Value| -> f64 {
        r["allocation"]["bits"].as_array().unwrap().iter().map(|b| b.as_f64().unwrap()).sum()
    };
    let total = bits(&reports[0]);
    for r in reports {
        assert!((bits(r) - total).abs() <= 1e-6 * total);
        assert_eq!(r["feasibility"]["power_ok"], true);
    }
    assert!(reports[1]["trace"]["h_values"].is_array());
}

#[test]
fn malformed_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", "{\n  \"system\": {\n    \"kappa\": ,\n  }\n}\n");
    let out = fogalloc(&["solve"], Some(&bad));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");

    let unknown = write(dir.path(), "unknown.json", r#"{"sytem": {}}"#);
    assert_eq!(fogalloc(&["solve"], Some(&unknown)).status.code(), Some(1));

    let invalid = write(dir.path(), "invalid.json", r#"{"methods": {"gamma": 1.5}}"#);
    assert_eq!(fogalloc(&["solve"], Some(&invalid)).status.code(), Some(1));

    assert_eq!(fogalloc(&["solve"], Some(&dir.path().join("missing.json"))).status.code(), Some(1));
}

#[test]
fn unreachable_deadline_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // the active device alone cannot meet the deadline and nobody is nearby
    let cfg = write(
        dir.path(),
        "tight.json",
        r#"{"system": {"offload_devices": 0, "f0_max_hz": 1e6}}"#,
    );
    let out = fogalloc(&["solve", "--method", "local"], Some(&cfg));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"experiment": {"seed": 1}, "method": "two-step"}"#,
    );
    let v = json(&fogalloc(&["solve"], Some(&cfg)));
    assert_eq!(v["seed"], 1);
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);

    let v = json(&fogalloc(&["solve", "--seed", "9", "--method", "local"], Some(&cfg)));
    assert_eq!(v["seed"], 9);
    assert_eq!(v["reports"].as_array().unwrap().len(), 1);
}

#[test]
fn solve_writes_to_out() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("report.json");
    let out = fogalloc(&["solve", "--method", "two-step", "--out", out_path.to_str().unwrap()], None);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_path).unwrap()).unwrap();
    assert_eq!(v["reports"][1]["method"], "two-step");
}

#[test]
fn sweep_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        r#"{"experiment": {"runs": 4, "devices": [1, 2], "t_max_grid": [0.5, 0.8, 1.0]}}"#,
    );
    let out = fogalloc(&["sweep-tmax", "--jobs", "2"], Some(&cfg));
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,J,t_max,F_max,method,energy_J,wall_time_s,iterations,feasible,failure_code"
    );
    // points x J x runs x methods
    assert_eq!(lines.count(), 3 * 2 * 4 * 3);

    let out = fogalloc(&["sweep-fmax", "--method", "local"], Some(&cfg));
    assert!(out.status.success());
    let rows = String::from_utf8(out.stdout).unwrap().lines().count() - 1;
    assert_eq!(rows, Config::default().experiment.f_max_grid.len() * 2 * 4);
}

#[test]
fn sweep_summary_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let summary = dir.path().join("summary.json");
    let csv = dir.path().join("rows.csv");
    let cfg = write(
        dir.path(),
        "s.json",
        &format!(
            r#"{{"experiment": {{"runs": 2, "devices": [1], "t_max_grid": [1.0]}},
                "output": {{"csv": {:?}, "summary": {:?}}}}}"#,
            csv.to_str().unwrap(),
            summary.to_str().unwrap()
        ),
    );
    let out = fogalloc(&["sweep-tmax"], Some(&cfg));
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 1 + 2 * 3);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(summary).unwrap()).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 3);
}

#[test]
fn runtime_table_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "r.json",
        r#"{"experiment": {"runtime_runs": 2, "runtime_devices": [1], "runtime_f_max": [1e8]}}"#,
    );
    let out = fogalloc(&["runtime"], Some(&cfg));
    assert!(out.status.success());
    let v = json(&out);
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["J"], 1);
    assert!(rows[0]["time_ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn validate_passes() {
    let out = fogalloc(&["validate"], None);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{table}");
    assert!(!table.contains("FAIL"));
    assert!(table.lines().count() >= 5);
}
