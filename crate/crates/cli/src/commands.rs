use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sqg_core::embed::{embedder_registry, Embedder};
use sqg_core::generate::{provider_registry, strategy_registry, GenerateError, GenerationOptions, GenerationRequest};
use sqg_core::kb::{ingest_qa_pairs, load_kb, save_kb};
use sqg_core::metrics::{
    acceptance_ratio, evaluate_run, render_table, write_curve_csv, MetricsReport, PairInput, TableRow,
};
use sqg_core::prompt::{build_training_samples, export_finetune_jsonl, TrainingConfig};
use sqg_core::retrieval::{read_queries, run_experiment};
use sqg_core::review::{
    apply_marks, candidate_items, read_mark_log, MarkEvent, MemoryCatalog, ReviewMark, ReviewStore,
};
use sqg_core::{CompletionProvider, GenerationBatch, KnowledgeBase};

use crate::config::RunConfig;
use crate::run::{self, RunDir, StepOutput};
use crate::CliError;

/// Seed spacing between pairs, so per-call seeds of neighbouring pairs
/// never overlap.
const PAIR_SEED_STRIDE: u64 = 10_000;

/// One line of `batches.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct BatchRecord {
    pub run_id: String,
    pub manifest: String,
    pub seed: u64,
    #[serde(flatten)]
    pub batch: GenerationBatch,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsFile {
    pub run_id: String,
    pub manifest: String,
    pub seed: u64,
    pub config_hash: String,
    pub mode: String,
    pub label: String,
    pub embedder: String,
    pub counts: Vec<usize>,
    pub reports: Vec<MetricsReport>,
}

fn summary(value: Value) {
    println!("{value}");
}

fn load(path: &Path) -> Result<KnowledgeBase, CliError> {
    load_kb(path).map_err(CliError::runtime)
}

fn embedder(cfg: &RunConfig) -> Result<Box<dyn Embedder>, CliError> {
    embedder_registry()
        .create(&cfg.embedder.kind, &cfg.embedder)
        .map_err(|e| CliError::config(e.to_string()))
}

pub fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Utc::now();
    let input = cfg
        .kb
        .input
        .clone()
        .ok_or_else(|| CliError::config("no input file; pass --input or set kb.input"))?;
    if !input.exists() {
        return Err(CliError::config(format!("input {} does not exist", input.display())));
    }
    let format = cfg.input_format()?;
    let name = cfg.kb.name.clone().unwrap_or_else(|| {
        input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "kb".into())
    });
    let run = RunDir::new(cfg)?;
    let mut ingested = ingest_qa_pairs(&input, format, &name).map_err(CliError::runtime)?;
    // Stamp the source file's mtime so re-ingesting the same file is byte-stable.
    if let Ok(modified) = std::fs::metadata(&input).and_then(|m| m.modified()) {
        ingested.kb.metadata.created_at = chrono::DateTime::<Utc>::from(modified);
    }
    for w in &ingested.warnings {
        log::warn!("{w}");
    }
    run.create()?;
    save_kb(&ingested.kb, &run.file(run::KB)).map_err(CliError::runtime)?;

    let mut out = StepOutput::default();
    out.artifact(run::KB, run.digest(run::KB)?)
        .detail("pairs", ingested.kb.len())
        .detail("warnings", &ingested.warnings);
    run.record("ingest", cfg, started, out)?;
    summary(json!({
        "command": "ingest",
        "run_id": run.run_id,
        "run_dir": run::display(&run.path),
        "pairs": ingested.kb.len(),
        "questions": ingested.kb.pairs.iter().map(|p| p.questions.len()).sum::<usize>(),
        "warnings": ingested.warnings.len(),
    }));
    Ok(())
}

pub fn build_train(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Utc::now();
    let run = RunDir::new(cfg)?;
    let kb = load(&run.require(run::KB, "ingest")?)?;
    let tc = TrainingConfig {
        paradigm: cfg.paradigm()?,
        targets: cfg.training.targets,
        samples_per_pair: cfg.samples_per_pair()?,
        seed: cfg.seed,
    };
    let set = build_training_samples(&kb, &tc).map_err(|e| match e {
        sqg_core::prompt::PromptError::InvalidTargetCount => CliError::config(e.to_string()),
        other => CliError::runtime(other),
    })?;
    for id in &set.skipped_pairs {
        log::warn!(
            "pair {id}: too few questions for {} training samples, skipped",
            tc.paradigm
        );
    }
    let target = cfg.training.output.clone().unwrap_or_else(|| run.file(run::TRAIN));
    export_finetune_jsonl(&set.samples, &target).map_err(CliError::runtime)?;

    let bytes = std::fs::read(&target).map_err(CliError::runtime)?;
    let mut out = StepOutput::default();
    out.artifact(&run::display(&target), crate::config::sha256_hex(&bytes))
        .detail("samples", set.samples.len())
        .detail("skipped_pairs", &set.skipped_pairs)
        .detail("paradigm", tc.paradigm);
    run.create()?;
    run.record("build-train", cfg, started, out)?;
    summary(json!({
        "command": "build-train",
        "run_id": run.run_id,
        "output": run::display(&target),
        "samples": set.samples.len(),
        "skipped_pairs": set.skipped_pairs,
    }));
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Utc::now();
    let mode = cfg.mode()?;
    let params = cfg.sampling()?;
    if cfg.generation.n == 0 {
        return Err(CliError::config("generation.n must be at least 1"));
    }
    if mode.is_batch() && cfg.generation.k_per_call == 0 {
        return Err(CliError::config("generation.k_per_call must be at least 1"));
    }
    if cfg.generation.parallelism == 0 {
        return Err(CliError::config("generation.parallelism must be at least 1"));
    }
    if cfg.provider.kind == "mock" {
        match &cfg.provider.script {
            Some(p) if p.exists() => {}
            Some(p) => return Err(CliError::config(format!("mock script {} does not exist", p.display()))),
            None => return Err(CliError::config("the mock provider needs provider.script or --script")),
        }
    }
    let run = RunDir::new(cfg)?;
    let kb = load(&run.require(run::KB, "ingest")?)?;
    let provider: Box<dyn CompletionProvider> = provider_registry()
        .create(&cfg.provider.kind, &cfg.provider)
        .map_err(|e| CliError::config(e.to_string()))?;
    let strategy = strategy_registry()
        .create(mode.as_str(), &())
        .map_err(|e| CliError::config(e.to_string()))?;

    let mut lines = Vec::new();
    let mut expanded = kb.clone();
    let mut failed: Vec<Value> = Vec::new();
    let mut underfilled = Vec::new();
    let mut total = 0;
    for (idx, pair) in kb.pairs.iter().enumerate() {
        let mut p = params.clone();
        p.seed = Some(cfg.seed.wrapping_add(idx as u64 * PAIR_SEED_STRIDE));
        let req = GenerationRequest {
            n: cfg.generation.n,
            k_per_call: cfg.generation.k_per_call,
            params: p,
            options: GenerationOptions {
                parallelism: cfg.generation.parallelism,
                ..Default::default()
            },
        };
        match strategy.generate(provider.as_ref(), pair, &req) {
            Ok(batch) => {
                if batch.underfilled {
                    log::warn!(
                        "pair {}: {} of {} questions after {} calls",
                        pair.pair_id,
                        batch.questions.len(),
                        batch.requested,
                        batch.calls
                    );
                    underfilled.push(pair.pair_id.clone());
                }
                total += batch.questions.len();
                expanded = expanded
                    .attach_generated(&pair.pair_id, &batch)
                    .map_err(CliError::runtime)?;
                let record = BatchRecord {
                    run_id: run.run_id.clone(),
                    manifest: run::MANIFEST.into(),
                    seed: cfg.seed,
                    batch,
                };
                lines.push(serde_json::to_string(&record).map_err(CliError::runtime)?);
            }
            Err(GenerateError::AllCallsFailed { pair_id, failures }) => {
                log::error!("pair {pair_id}: every provider call failed");
                failed.push(json!({"pair_id": pair_id, "failures": failures}));
            }
            Err(e @ (GenerateError::InvalidCount | GenerateError::InvalidParams(_))) => {
                return Err(CliError::config(e.to_string()))
            }
            Err(e) => {
                log::error!("pair {}: {e}", pair.pair_id);
                failed.push(json!({"pair_id": pair.pair_id, "message": e.to_string()}));
            }
        }
    }

    run.create()?;
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    let mut out = StepOutput::default();
    out.artifact(run::BATCHES, run.write(run::BATCHES, body.as_bytes())?);
    save_kb(&expanded, &run.file(run::KB_EXPANDED)).map_err(CliError::runtime)?;
    out.artifact(run::KB_EXPANDED, run.digest(run::KB_EXPANDED)?)
        .detail("mode", mode)
        .detail("questions", total)
        .detail("underfilled", &underfilled)
        .detail("failed", &failed);
    out.provider = Some(provider.id().to_string());
    run.record("generate", cfg, started, out)?;

    summary(json!({
        "command": "generate",
        "run_id": run.run_id,
        "run_dir": run::display(&run.path),
        "mode": mode,
        "pairs": lines.len(),
        "questions": total,
        "underfilled": underfilled,
        "failed": failed.len(),
    }));
    if !failed.is_empty() {
        return Err(CliError::runtime(format!(
            "{} of {} pairs failed: {}",
            failed.len(),
            kb.len(),
            serde_json::to_string(&failed).unwrap_or_default()
        )));
    }
    Ok(())
}

fn read_batches(path: &Path) -> Result<Vec<BatchRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::runtime)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::runtime(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Utc::now();
    let counts = cfg.evaluation.counts.clone();
    if counts.is_empty() || counts.contains(&0) {
        return Err(CliError::config("evaluation counts must be non-empty and positive"));
    }
    let run = RunDir::new(cfg)?;
    let kb = load(&run.require(run::KB, "ingest")?)?;
    let batches = read_batches(&run.require(run::BATCHES, "generate")?)?;
    let embedder = embedder(cfg)?;

    let mut generated: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut mode = None;
    for r in &batches {
        generated
            .entry(r.batch.pair_id.as_str())
            .or_default()
            .extend(r.batch.questions.iter().cloned());
        mode = Some(r.batch.mode);
    }
    let inputs: Vec<PairInput> = kb
        .pairs
        .iter()
        .filter_map(|p| {
            generated
                .get(p.pair_id.as_str())
                .map(|g| PairInput::from_pair(p, g.clone()))
        })
        .collect();
    let mode = mode.ok_or_else(|| CliError::runtime("batches.jsonl holds no batches"))?;
    let label = cfg
        .evaluation
        .label
        .clone()
        .unwrap_or_else(|| mode.display_name().to_string());

    let reports = evaluate_run(&label, &inputs, embedder.as_ref(), &counts).map_err(CliError::runtime)?;
    let metrics = MetricsFile {
        run_id: run.run_id.clone(),
        manifest: run::MANIFEST.into(),
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        mode: mode.as_str().into(),
        label: label.clone(),
        embedder: embedder.id().to_string(),
        counts: counts.clone(),
        reports: reports.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&metrics).map_err(CliError::runtime)?;
    bytes.push(b'\n');
    let mut curve = Vec::new();
    write_curve_csv(&reports, &mut curve).map_err(CliError::runtime)?;

    let mut out = StepOutput::default();
    out.artifact(run::METRICS, run.write(run::METRICS, &bytes)?)
        .artifact(run::CURVE, run.write(run::CURVE, &curve)?)
        .detail("counts", &counts);
    out.embedder = Some(embedder.id().to_string());
    run.record("evaluate", cfg, started, out)?;

    let last = reports.last().expect("counts is non-empty");
    summary(json!({
        "command": "evaluate",
        "run_id": run.run_id,
        "label": label,
        "rows": reports.len(),
        "n": last.generated_count,
        "precision": last.precision,
        "recall": last.recall,
        "f1": last.f1,
        "distinct_avg": last.distinct_avg,
    }));
    Ok(())
}

/// First verdict per item across all sessions of the run.
fn run_marks(run: &RunDir) -> Result<Vec<MarkEvent>, CliError> {
    let events = read_mark_log(&run.file(run::MARKS)).map_err(CliError::runtime)?;
    let mut seen = HashSet::new();
    Ok(events
        .into_iter()
        .filter(|e| seen.insert(e.mark.item_id.clone()))
        .collect())
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Utc::now();
    let conditions = cfg.conditions()?;
    let queries_path = cfg
        .retrieval
        .queries
        .clone()
        .ok_or_else(|| CliError::config("no query file; pass --queries or set retrieval.queries"))?;
    if !queries_path.exists() {
        return Err(CliError::config(format!(
            "query file {} does not exist",
            queries_path.display()
        )));
    }
    let run = RunDir::new(cfg)?;
    let kb_path = if run.file(run::KB_EXPANDED).exists() {
        run.file(run::KB_EXPANDED)
    } else {
        run.require(run::KB, "ingest")?
    };
    let marks = run_marks(&run)?;
    let kb = apply_marks(&load(&kb_path)?, &marks).map_err(CliError::runtime)?;
    let queries = read_queries(&queries_path).map_err(|e| CliError::config(e.to_string()))?;
    let embedder = embedder(cfg)?;
    let table = run_experiment(&kb, embedder.as_ref(), &queries, &conditions).map_err(CliError::runtime)?;

    run.create()?;
    let mut out = StepOutput::default();
    let mut detail = serde_json::to_vec_pretty(&json!({
        "run_id": run.run_id,
        "manifest": run::MANIFEST,
        "seed": cfg.seed,
        "table": table,
    }))
    .map_err(CliError::runtime)?;
    detail.push(b'\n');
    out.artifact(run::ACCURACY, run.write(run::ACCURACY, table.to_csv().as_bytes())?)
        .artifact(run::ACCURACY_JSON, run.write(run::ACCURACY_JSON, &detail)?)
        .detail("marks_applied", marks.len());
    out.embedder = Some(embedder.id().to_string());
    run.record("simulate", cfg, started, out)?;

    let rows: Vec<Value> = table
        .conditions
        .iter()
        .map(|c| json!({"condition": c.condition, "top1_accuracy": c.top1_accuracy, "index_size": c.index_size}))
        .collect();
    summary(json!({"command": "simulate", "run_id": run.run_id, "n_queries": queries.len(), "conditions": rows}));
    Ok(())
}

pub fn review_serve(cfg: &RunConfig) -> Result<(), CliError> {
    let addr: std::net::SocketAddr = cfg
        .review
        .addr
        .parse()
        .map_err(|e| CliError::config(format!("invalid address `{}`: {e}", cfg.review.addr)))?;
    let run = RunDir::new(cfg)?;
    let kb = load(&run.require(run::KB_EXPANDED, "generate")?)?;
    let mut catalog = MemoryCatalog::default();
    catalog.insert(run.run_id.clone(), candidate_items(&kb));
    let store = ReviewStore::open(catalog, &run.path).map_err(CliError::runtime)?;
    eprintln!("reviewing run {} at http://{addr}", run.run_id);
    let rt = tokio::runtime::Runtime::new().map_err(CliError::runtime)?;
    rt.block_on(sqg_review_service::serve(addr, Arc::new(store)))
        .map_err(CliError::runtime)
}

pub fn report(cfg: &RunConfig, runs: &[String], at: usize) -> Result<(), CliError> {
    let started = Utc::now();
    let current = RunDir::new(cfg)?;
    let ids: Vec<String> = if runs.is_empty() {
        vec![current.run_id.clone()]
    } else {
        runs.to_vec()
    };
    let mut rows = Vec::new();
    let mut n = None;
    for id in &ids {
        let mut c = cfg.clone();
        c.run_id = Some(id.clone());
        let run = RunDir::new(&c)?;
        let text = std::fs::read_to_string(run.require(run::METRICS, "evaluate")?).map_err(CliError::runtime)?;
        let metrics: MetricsFile = serde_json::from_str(&text).map_err(CliError::runtime)?;
        let mut report = match metrics.reports.iter().find(|r| r.generated_count == at) {
            Some(r) => r.clone(),
            None => {
                let r = metrics
                    .reports
                    .iter()
                    .max_by_key(|r| r.generated_count)
                    .cloned()
                    .ok_or_else(|| CliError::runtime(format!("run {id}: metrics.json has no reports")))?;
                log::warn!("run {id}: no report at n={at}; using n={}", r.generated_count);
                r
            }
        };
        let marks: Vec<ReviewMark> = run_marks(&run)?.into_iter().map(|e| e.mark).collect();
        report.acceptance_ratio = acceptance_ratio(&marks).ok();
        n = n.or(Some(report.generated_count));
        rows.push(TableRow {
            label: metrics.label,
            report,
        });
    }
    let mut text = render_table(&rows);
    text.push_str(&format!(
        "\nquestions per source: {}\nruns: {}\nmanifest: {}\n",
        n.unwrap_or(0),
        ids.join(", "),
        run::MANIFEST
    ));
    print!("{text}");

    current.create()?;
    let mut out = StepOutput::default();
    out.artifact(run::REPORT, current.write(run::REPORT, text.as_bytes())?)
        .detail("runs", &ids);
    current.record("report", cfg, started, out)?;
    Ok(())
}
