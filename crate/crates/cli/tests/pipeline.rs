mod common;

use std::fs;

use common::{error_report, full_pipeline, sqg, sqg_ok};
use serde_json::Value;
use sqg_core::generate::GenerationBatch;
use sqg_core::kb::load_kb;
use sqg_core::prompt::read_finetune_jsonl;

fn batches(dir: &std::path::Path) -> Vec<GenerationBatch> {
    fs::read_to_string(dir.join("batches.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn demo_pipeline_writes_every_artifact() {
    let runs = tempfile::tempdir().unwrap();
    let dir = full_pipeline(runs.path(), &[]);
    for f in [
        "kb.jsonl",
        "batches.jsonl",
        "kb_expanded.jsonl",
        "metrics.json",
        "curve.csv",
        "report.txt",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let bs = batches(&dir);
    assert_eq!(bs.len(), 5);
    assert!(bs.iter().all(|b| b.questions.len() == 100 && !b.underfilled));

    let curve = fs::read_to_string(dir.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 11);

    let report = fs::read_to_string(dir.join("report.txt")).unwrap();
    assert!(report.starts_with("Models"));
    assert!(report.contains("Context-Aware"));
    assert!(report.contains("questions per source: 20"));

    let kb = load_kb(&dir.join("kb_expanded.jsonl")).unwrap();
    assert_eq!(kb.pairs.iter().map(|p| p.generated.len()).sum::<usize>(), 500);
}

#[test]
fn manifest_records_steps_with_artifact_digests() {
    let runs = tempfile::tempdir().unwrap();
    let dir = full_pipeline(runs.path(), &[]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 20231018);
    assert_eq!(manifest["provider"], "mock");
    assert_eq!(
        manifest["run_id"].as_str().unwrap(),
        dir.file_name().unwrap().to_str().unwrap()
    );
    let hash = manifest["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    for step in ["ingest", "generate", "evaluate", "report"] {
        let s = &manifest["steps"][step];
        assert_eq!(s["config_hash"], hash, "{step}");
        for (name, digest) in s["artifacts"].as_object().unwrap() {
            let bytes = fs::read(dir.join(name)).unwrap();
            let actual = sha256(&bytes);
            assert_eq!(digest.as_str().unwrap(), actual, "{step}/{name}");
        }
    }
    assert!(manifest["steps"]["evaluate"]["artifacts"].get("curve.csv").is_some());
}

fn sha256(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn intention_mode_fills_twenty_in_one_call() {
    let runs = tempfile::tempdir().unwrap();
    let flags = ["--mode", "intention", "--n", "20", "--k", "20"];
    let mut args = vec!["ingest"];
    args.extend(flags);
    let summary = sqg_ok(runs.path(), &args);
    let dir = std::path::PathBuf::from(summary["run_dir"].as_str().unwrap());
    assert!(summary["run_id"].as_str().unwrap().starts_with("intention-enhanced-"));
    let mut args = vec!["generate"];
    args.extend(flags);
    let summary = sqg_ok(runs.path(), &args);
    assert_eq!(summary["questions"], 100);
    for b in batches(&dir) {
        assert_eq!(b.questions.len(), 20, "{}", b.pair_id);
        assert_eq!(b.calls, 1);
        assert!(!b.underfilled);
    }
}

#[test]
fn build_train_exports_requested_samples() {
    let runs = tempfile::tempdir().unwrap();
    let summary = sqg_ok(runs.path(), &["ingest"]);
    let dir = std::path::PathBuf::from(summary["run_dir"].as_str().unwrap());
    sqg_ok(
        runs.path(),
        &[
            "build-train",
            "--paradigm",
            "context_aware",
            "--targets",
            "2",
            "--samples-per-pair",
            "3",
        ],
    );
    let records = read_finetune_jsonl(&dir.join("train.jsonl")).unwrap();
    // Every demo pair has at least three questions.
    assert_eq!(records.len(), 15);
    assert!(records.iter().all(|r| r.input.is_empty() && !r.output.is_empty()));
}

#[test]
fn simulate_writes_accuracy_table() {
    let runs = tempfile::tempdir().unwrap();
    let dir = full_pipeline(runs.path(), &[]);
    let summary = sqg_ok(runs.path(), &["simulate"]);
    assert_eq!(summary["n_queries"], 15);
    let csv = fs::read_to_string(dir.join("accuracy.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("condition,top1_accuracy,n_queries"));
    assert_eq!(lines.count(), 3);
    let none = summary["conditions"][0]["top1_accuracy"].as_f64().unwrap();
    let all = summary["conditions"][2]["top1_accuracy"].as_f64().unwrap();
    assert!(all >= none);
}

#[test]
fn usage_errors_exit_two() {
    let runs = tempfile::tempdir().unwrap();
    assert_eq!(sqg(runs.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        sqg(runs.path(), &["evaluate", "--counts", "ten"]).status.code(),
        Some(2)
    );
    let out = sqg(runs.path(), &["generate", "--mode", "telepathy"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_report(&out)["error"]["kind"], "config");
}

#[test]
fn missing_knowledge_base_is_a_config_error() {
    let runs = tempfile::tempdir().unwrap();
    let out = sqg(runs.path(), &["generate"]);
    assert_eq!(out.status.code(), Some(2));
    let report = error_report(&out);
    assert_eq!(report["error"]["command"], "generate");
    assert!(report["error"]["message"].as_str().unwrap().contains("sqg ingest"));
}

#[test]
fn unreachable_provider_is_a_runtime_error() {
    let runs = tempfile::tempdir().unwrap();
    let flags = [
        "--provider",
        "http",
        "--provider-url",
        "http://127.0.0.1:9",
        "--n",
        "2",
        "--k",
        "2",
    ];
    let mut args = vec!["ingest"];
    args.extend(flags);
    sqg_ok(runs.path(), &args);
    let mut args = vec!["generate"];
    args.extend(flags);
    let out = sqg(runs.path(), &args);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_report(&out)["error"]["kind"], "runtime");
}
