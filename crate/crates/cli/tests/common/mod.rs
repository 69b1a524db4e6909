#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/demo")
}

pub fn demo_config() -> PathBuf {
    demo_dir().join("config.json")
}

/// Runs `sqg` with the demo config and `runs` as the runs directory.
pub fn sqg(runs: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sqg"));
    cmd.arg("--config")
        .arg(demo_config())
        .arg("--runs-dir")
        .arg(runs)
        .args(args)
        .env_remove("SQG_PROVIDER_URL")
        .env_remove("SQG_EMBED_URL")
        .env("RUST_LOG", "error");
    cmd.output().expect("spawn sqg")
}

/// Runs a command that must succeed and returns its JSON summary line.
pub fn sqg_ok(runs: &Path, args: &[&str]) -> Value {
    let out = sqg(runs, args);
    assert!(
        out.status.success(),
        "sqg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let line = stdout.lines().find(|l| l.starts_with('{')).expect("json summary");
    serde_json::from_str(line).unwrap()
}

/// The JSON error report printed on stderr.
pub fn error_report(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with("{\"error\""))
        .unwrap_or_else(|| panic!("no error report in {stderr}"));
    serde_json::from_str(line).unwrap()
}

/// ingest, generate, evaluate and report; returns the run directory.
pub fn full_pipeline(runs: &Path, extra: &[&str]) -> PathBuf {
    let with = |cmd: &'static str| -> Vec<&str> { std::iter::once(cmd).chain(extra.iter().copied()).collect() };
    let summary = sqg_ok(runs, &with("ingest"));
    sqg_ok(runs, &with("generate"));
    sqg_ok(runs, &with("evaluate"));
    let out = sqg(runs, &with("report"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(summary["run_dir"].as_str().unwrap())
}
