use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn traffic_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/traffic.cfg")
}

fn infinet(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infinet"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn with_config(sub: &str, extra: &[&str], out: &Path) -> Output {
    let cfg = traffic_cfg();
    let mut args = vec![sub, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    infinet(&args, out)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn design_writes_pitch_and_passes_verification() {
    let dir = tempfile::tempdir().unwrap();
    let out = with_config("design", &[], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let art = read_json(&dir.path().join("design.json"));
    let units = art["design"]["units"].as_array().unwrap();
    assert_eq!(units.len(), 6);
    for u in units {
        assert_eq!(u["eta_x"].as_f64(), Some(0.1));
        assert_eq!(u["varpi"].as_f64(), Some(0.8));
    }
    assert_eq!(art["verification"]["passed"], Value::Bool(true));
}

#[test]
fn negative_precision_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = with_config("design", &["--varpi", "-1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn odd_truncation_is_rejected_at_instantiation() {
    let dir = tempfile::tempdir().unwrap();
    let out = with_config("design", &["--truncation", "9"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = infinet(&["design", "--config", "/nonexistent/net.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = infinet(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validate_accepts_bundled_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = with_config("validate", &[], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validate_reports_safe_set_outside_state_set() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(traffic_cfg()).unwrap();
    let bad = text.replacen(r#""safe_set": [["5", "15"]]"#, r#""safe_set": [["4", "15"]]"#, 1);
    assert_ne!(bad, text);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, bad).unwrap();
    let out = infinet(&["validate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!report["diagnostics"].as_array().unwrap().is_empty());
}

#[test]
fn synthesize_then_verify_and_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let out = with_config("synthesize", &[], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let index = read_json(&dir.path().join("models/index.json"));
    assert_eq!(index.as_array().unwrap().len(), 5);

    let out = with_config("verify", &[], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("verify.json").exists());

    let out = with_config("simulate", &["--seed", "7", "--steps", "20"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("traj_seed7.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("step,node,subnetwork,x,xhat,u,"));
    // 21 steps of 40 nodes
    assert_eq!(lines.count(), 21 * 40);
}

#[test]
fn reproduce_traffic_passes_with_bundled_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = infinet(&["reproduce-traffic"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("reproduce.json"));
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["pass"] == Value::Bool(true)));
}
