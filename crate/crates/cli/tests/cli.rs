use std::path::PathBuf;
use std::process::{Command, Output};

fn gaitproj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaitproj")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gaitproj-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn gait_find_prints_csv() {
    let out = gaitproj(&["gait", "find"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 2);
}

#[test]
fn dlqr_design_as_json_lines() {
    let out = gaitproj(&["dlqr", "design", "--format", "json"]);
    assert!(out.status.success());
    let rows: Vec<serde_json::Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["variant"], "aggressive");
    assert!(rows.iter().all(|r| r["spectral_radius"].as_f64().unwrap() < 1.0));
}

#[test]
fn ctpc_run_writes_tables() {
    let dir = scratch("ctpc");
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, "strides = 4\n[[pushes]]\nw = [15.0, 0.0, 0.0, 0.0]\nt_start = 1.2\nt_end = 1.4\n").unwrap();
    let out = gaitproj(&["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "ctpc", "run", "--steps"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let strides = std::fs::read_to_string(dir.join("strides.csv")).unwrap();
    assert_eq!(strides.lines().count(), 5);
    assert!(dir.join("steps.csv").exists());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn config_problems_exit_with_2() {
    let dir = scratch("bad");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "speed = -3.0\n").unwrap();
    let out = gaitproj(&["--config", cfg.to_str().unwrap(), "gait", "find"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("speed"));
    let missing = gaitproj(&["--config", dir.join("nope.toml").to_str().unwrap(), "gait", "find"]);
    assert_eq!(missing.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn usage_errors_are_reported_by_clap() {
    let out = gaitproj(&["analyze", "everything"]);
    assert!(!out.status.success());
    let out = gaitproj(&["gait", "find", "--format", "xml"]);
    assert!(!out.status.success());
}
