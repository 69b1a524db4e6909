//! `sqg`: similar-question generation pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
//! Failures also print a JSON error report on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

mod commands;
mod config;
mod run;

use config::{parse_counts, RunConfig, SamplesSetting};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn runtime(msg: impl ToString) -> Self {
        CliError::Runtime(msg.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sqg",
    version,
    about = "Generate, evaluate and review similar questions for QA knowledge bases"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent directory of run directories [default: runs].
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    /// Explicit run id instead of the one derived from the configuration.
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(flatten)]
    gen: GenerateArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load QA pairs (JSONL or CSV) into the run's knowledge base.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        /// jsonl or csv; inferred from the extension when omitted.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Build instruction-tuning samples and export them as JSONL.
    BuildTrain {
        /// one_to_one, context_aware or intention_enhanced.
        #[arg(long)]
        paradigm: Option<String>,
        /// Targets per batch sample.
        #[arg(long)]
        targets: Option<usize>,
        /// A count or `all`.
        #[arg(long)]
        samples_per_pair: Option<String>,
        /// Output file [default: <run>/train.jsonl].
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate similar questions for every pair of the knowledge base.
    Generate,
    /// Score generated questions at several generation counts.
    Evaluate {
        /// Comma list (10,20,30) or range (10..100:10).
        #[arg(long)]
        counts: Option<String>,
        /// Row label in reports.
        #[arg(long)]
        label: Option<String>,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Measure top-1 retrieval accuracy with and without generated questions.
    Simulate {
        /// Labelled queries, JSONL {"query", "expected_pair_id"}.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Comma list of none, accepted_only, all.
        #[arg(long)]
        conditions: Option<String>,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Serve the review API for the run's generated questions.
    ReviewServe {
        #[arg(long)]
        addr: Option<String>,
    },
    /// Render the comparison table for one or more runs.
    Report {
        /// Run ids to compare [default: the current run].
        #[arg(long, value_delimiter = ',')]
        runs: Vec<String>,
        /// Generation count whose scores fill the table.
        #[arg(long, default_value_t = 20)]
        at: usize,
    },
}

/// Generation settings. They take part in the run id, so every command
/// accepts them.
#[derive(Debug, Args)]
struct GenerateArgs {
    /// one_to_one, context_aware or intention_enhanced (or one, context, intention).
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Unique questions wanted per pair.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Questions requested per batch call.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    top_k: Option<u32>,
    #[arg(long, global = true)]
    top_p: Option<f64>,
    #[arg(long, global = true)]
    max_tokens: Option<u32>,
    /// Provider kind: mock or http.
    #[arg(long, global = true)]
    provider: Option<String>,
    /// Mock provider script.
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// Provider base URL (http); defaults to $SQG_PROVIDER_URL.
    #[arg(long, global = true)]
    provider_url: Option<String>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// Embedder kind: hash, lookup or http.
    #[arg(long)]
    embedder: Option<String>,
    /// Vector size for the hash embedder.
    #[arg(long)]
    dim: Option<usize>,
    /// Vector table for the lookup embedder.
    #[arg(long)]
    embed_table: Option<PathBuf>,
    /// Embedding service base URL; defaults to $SQG_EMBED_URL.
    #[arg(long)]
    embed_url: Option<String>,
}

fn cwd_path(p: PathBuf) -> PathBuf {
    if p.is_relative() {
        std::env::current_dir().map(|d| d.join(&p)).unwrap_or(p)
    } else {
        p
    }
}

fn apply_embed(cfg: &mut RunConfig, e: EmbedArgs) {
    if let Some(kind) = e.embedder {
        cfg.embedder.kind = kind;
    }
    if e.dim.is_some() {
        cfg.embedder.dim = e.dim;
    }
    if let Some(t) = e.embed_table {
        cfg.embedder.table = Some(cwd_path(t));
    }
    if e.embed_url.is_some() {
        cfg.embedder.url = e.embed_url;
    }
}

fn apply_generate(cfg: &mut RunConfig, g: GenerateArgs) {
    let gen = &mut cfg.generation;
    if let Some(m) = g.mode {
        gen.mode = m;
    }
    if let Some(n) = g.n {
        gen.n = n;
    }
    if let Some(k) = g.k {
        gen.k_per_call = k;
    }
    if g.temperature.is_some() {
        gen.sampling.temperature = g.temperature;
    }
    if g.top_k.is_some() {
        gen.sampling.top_k = g.top_k;
    }
    if g.top_p.is_some() {
        gen.sampling.top_p = g.top_p;
    }
    if g.max_tokens.is_some() {
        gen.sampling.max_tokens = g.max_tokens;
    }
    if let Some(p) = g.parallelism {
        gen.parallelism = p;
    }
    if let Some(p) = g.provider {
        cfg.provider.kind = p;
    }
    if let Some(s) = g.script {
        cfg.provider.script = Some(cwd_path(s));
    }
    if g.provider_url.is_some() {
        cfg.provider.url = g.provider_url;
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Some(d) = cli.common.runs_dir {
        cfg.runs_dir = Some(cwd_path(d));
    }
    if cli.common.run_id.is_some() {
        cfg.run_id = cli.common.run_id;
    }
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    apply_generate(&mut cfg, cli.common.gen);
    match cli.command {
        Command::Ingest { input, format, name } => {
            if let Some(i) = input {
                cfg.kb.input = Some(cwd_path(i));
            }
            if format.is_some() {
                cfg.kb.format = format;
            }
            if name.is_some() {
                cfg.kb.name = name;
            }
            commands::ingest(&cfg)
        }
        Command::BuildTrain {
            paradigm,
            targets,
            samples_per_pair,
            output,
        } => {
            if let Some(p) = paradigm {
                cfg.training.paradigm = p;
            }
            if let Some(t) = targets {
                cfg.training.targets = t;
            }
            if let Some(s) = samples_per_pair {
                cfg.training.samples_per_pair = match s.parse::<usize>() {
                    Ok(n) => SamplesSetting::Count(n),
                    Err(_) => SamplesSetting::Word(s),
                };
            }
            if let Some(o) = output {
                cfg.training.output = Some(cwd_path(o));
            }
            commands::build_train(&cfg)
        }
        Command::Generate => commands::generate(&cfg),
        Command::Evaluate { counts, label, embed } => {
            if let Some(c) = counts {
                cfg.evaluation.counts = parse_counts(&c).map_err(CliError::config)?;
            }
            if label.is_some() {
                cfg.evaluation.label = label;
            }
            apply_embed(&mut cfg, embed);
            commands::evaluate(&cfg)
        }
        Command::Simulate {
            queries,
            conditions,
            embed,
        } => {
            if let Some(q) = queries {
                cfg.retrieval.queries = Some(cwd_path(q));
            }
            if let Some(c) = conditions {
                cfg.retrieval.conditions = c.split(',').map(|s| s.trim().to_string()).collect();
            }
            apply_embed(&mut cfg, embed);
            commands::simulate(&cfg)
        }
        Command::ReviewServe { addr } => {
            if let Some(a) = addr {
                cfg.review.addr = a;
            }
            commands::review_serve(&cfg)
        }
        Command::Report { runs, at } => commands::report(&cfg, &runs, at),
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Ingest { .. } => "ingest",
        Command::BuildTrain { .. } => "build-train",
        Command::Generate => "generate",
        Command::Evaluate { .. } => "evaluate",
        Command::Simulate { .. } => "simulate",
        Command::ReviewServe { .. } => "review-serve",
        Command::Report { .. } => "report",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap prints usage and exits with 2 on usage errors.
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, message) = match &e {
                CliError::Config(m) => ("config", m),
                CliError::Runtime(m) => ("runtime", m),
            };
            eprintln!(
                "{}",
                json!({"error": {"command": name, "kind": kind, "code": e.code(), "message": message}})
            );
            ExitCode::from(e.code())
        }
    }
}
