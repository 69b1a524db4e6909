//! Run directory layout and manifest bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{sha256_hex, RunConfig};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const KB: &str = "kb.jsonl";
pub const TRAIN: &str = "train.jsonl";
pub const BATCHES: &str = "batches.jsonl";
pub const KB_EXPANDED: &str = sqg_core::review::RUN_KB_FILE;
pub const METRICS: &str = "metrics.json";
pub const CURVE: &str = "curve.csv";
pub const REPORT: &str = "report.txt";
pub const ACCURACY: &str = "accuracy.csv";
pub const ACCURACY_JSON: &str = "accuracy.json";
pub const MARKS: &str = sqg_core::review::MARKS_LOG;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step {
    pub config_hash: String,
    pub seed: u64,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    /// File name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub provider: String,
    pub embedder: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub config: Value,
    pub steps: BTreeMap<String, Step>,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub run_id: String,
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(config: &RunConfig) -> Result<Self, CliError> {
        let run_id = config.run_id()?;
        let path = config.runs_dir().join(&run_id);
        Ok(Self { run_id, path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn create(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.path)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", self.path.display())))
    }

    /// Path of an input artifact written by an earlier command.
    pub fn require(&self, name: &str, producer: &str) -> Result<PathBuf, CliError> {
        let p = self.file(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::config(format!(
                "{} not found; run `sqg {producer}` for run {} first",
                p.display(),
                self.run_id
            )))
        }
    }

    /// Writes through a temporary file so readers never see partial output.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<String, CliError> {
        let target = self.file(name);
        let tmp = self.file(&format!(".{name}.tmp"));
        fs::write(&tmp, bytes)
            .and_then(|_| fs::rename(&tmp, &target))
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", target.display())))?;
        Ok(sha256_hex(bytes))
    }

    pub fn digest(&self, name: &str) -> Result<String, CliError> {
        let bytes = fs::read(self.file(name))
            .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", self.file(name).display())))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn manifest(&self) -> Option<Manifest> {
        let text = fs::read_to_string(self.file(MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Records a finished command in the manifest.
    pub fn record(
        &self,
        command: &str,
        config: &RunConfig,
        started_at: DateTime<Utc>,
        step: StepOutput,
    ) -> Result<(), CliError> {
        let now = Utc::now();
        let mut manifest = self.manifest().unwrap_or_else(|| Manifest {
            run_id: self.run_id.clone(),
            seed: config.seed,
            config_hash: config.config_hash(),
            provider: config.provider.kind.clone(),
            embedder: config.embedder.kind.clone(),
            created_at: started_at,
            updated_at: now,
            config: Value::Null,
            steps: BTreeMap::new(),
        });
        manifest.seed = config.seed;
        manifest.config_hash = config.config_hash();
        manifest.provider = step.provider.unwrap_or(manifest.provider);
        manifest.embedder = step.embedder.unwrap_or(manifest.embedder);
        manifest.updated_at = now;
        manifest.config = redacted(config);
        manifest.steps.insert(
            command.to_string(),
            Step {
                config_hash: config.config_hash(),
                seed: config.seed,
                started_at,
                finished_at: now,
                artifacts: step.artifacts,
                details: step.details,
            },
        );
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::runtime(e.to_string()))?;
        bytes.push(b'\n');
        self.write(MANIFEST, &bytes)?;
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct StepOutput {
    pub artifacts: BTreeMap<String, String>,
    pub details: BTreeMap<String, Value>,
    pub provider: Option<String>,
    pub embedder: Option<String>,
}

impl StepOutput {
    pub fn artifact(&mut self, name: &str, digest: String) -> &mut Self {
        self.artifacts.insert(name.to_string(), digest);
        self
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.details
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }
}

/// Config as stored in the manifest; credentials never leave the process.
fn redacted(config: &RunConfig) -> Value {
    // ProviderSpec skips its token on serialization already.
    serde_json::to_value(config).unwrap_or(Value::Null)
}

pub fn display(p: &Path) -> String {
    p.display().to_string()
}
