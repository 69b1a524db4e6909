//! Run configuration: a JSON file plus command-line overrides.
//!
//! Relative paths in the file resolve against the file's directory; paths
//! given as flags resolve against the working directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use sqg_core::embed::EmbedderSpec;
use sqg_core::generate::{GenerationOptions, ProviderSpec};
use sqg_core::kb::InputFormat;
use sqg_core::prompt::{SamplesPerPair, DEFAULT_BATCH_SIZE, DEFAULT_SAMPLES_PER_PAIR};
use sqg_core::retrieval::IncludeGenerated;
use sqg_core::{Mode, SamplingParams};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kb: KbConfig,
    #[serde(default = "default_provider")]
    pub provider: ProviderSpec,
    #[serde(default = "default_embedder")]
    pub embedder: EmbedderSpec,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub review: ReviewConfig,
}

fn default_provider() -> ProviderSpec {
    ProviderSpec {
        kind: "mock".into(),
        ..Default::default()
    }
}

fn default_embedder() -> EmbedderSpec {
    EmbedderSpec {
        kind: "hash".into(),
        dim: None,
        table: None,
        url: None,
        timeout_secs: None,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub mode: String,
    pub n: usize,
    pub k_per_call: usize,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    GenerationOptions::default().parallelism
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ContextAware.as_str().into(),
            n: 100,
            k_per_call: DEFAULT_BATCH_SIZE,
            sampling: SamplingConfig::default(),
            parallelism: default_parallelism(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SamplesSetting {
    Count(usize),
    Word(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub paradigm: String,
    pub targets: usize,
    pub samples_per_pair: SamplesSetting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            paradigm: Mode::ContextAware.as_str().into(),
            targets: DEFAULT_BATCH_SIZE,
            samples_per_pair: SamplesSetting::Count(DEFAULT_SAMPLES_PER_PAIR),
            output: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub counts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            counts: (1..=10).map(|i| i * 10).collect(),
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<PathBuf>,
    pub conditions: Vec<String>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            queries: None,
            conditions: IncludeGenerated::ALL.iter().map(|c| c.as_str().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewConfig {
    pub addr: String,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self {
                provider: default_provider(),
                embedder: default_embedder(),
                ..Default::default()
            });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        resolve(&base, &mut cfg.runs_dir);
        resolve(&base, &mut cfg.kb.input);
        resolve(&base, &mut cfg.provider.script);
        resolve(&base, &mut cfg.embedder.table);
        resolve(&base, &mut cfg.training.output);
        resolve(&base, &mut cfg.retrieval.queries);
        Ok(cfg)
    }

    pub fn mode(&self) -> Result<Mode, CliError> {
        self.generation
            .mode
            .parse()
            .map_err(|e: sqg_core::prompt::PromptError| CliError::config(e.to_string()))
    }

    pub fn paradigm(&self) -> Result<Mode, CliError> {
        self.training
            .paradigm
            .parse()
            .map_err(|e: sqg_core::prompt::PromptError| CliError::config(e.to_string()))
    }

    pub fn samples_per_pair(&self) -> Result<SamplesPerPair, CliError> {
        match &self.training.samples_per_pair {
            SamplesSetting::Count(0) => Err(CliError::config("samples_per_pair must be at least 1")),
            SamplesSetting::Count(n) => Ok(SamplesPerPair::Count(*n)),
            SamplesSetting::Word(w) => w.parse().map_err(CliError::config),
        }
    }

    pub fn input_format(&self) -> Result<InputFormat, CliError> {
        match (&self.kb.format, &self.kb.input) {
            (Some(f), _) => f.parse().map_err(CliError::config),
            (None, Some(p)) => InputFormat::from_path(p)
                .ok_or_else(|| CliError::config(format!("cannot infer format of {}; set kb.format", p.display()))),
            (None, None) => Err(CliError::config("kb.input is required")),
        }
    }

    pub fn sampling(&self) -> Result<SamplingParams, CliError> {
        let d = SamplingParams::default();
        let s = &self.generation.sampling;
        let params = SamplingParams {
            temperature: s.temperature.unwrap_or(d.temperature),
            top_k: s.top_k.or(d.top_k),
            top_p: s.top_p.or(d.top_p),
            max_tokens: s.max_tokens.unwrap_or(d.max_tokens),
            seed: Some(self.seed),
        };
        params.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(params)
    }

    pub fn conditions(&self) -> Result<Vec<IncludeGenerated>, CliError> {
        if self.retrieval.conditions.is_empty() {
            return Err(CliError::config("retrieval.conditions must not be empty"));
        }
        self.retrieval
            .conditions
            .iter()
            .map(|c| {
                c.parse()
                    .map_err(|e: sqg_core::retrieval::RetrievalError| CliError::config(e.to_string()))
            })
            .collect()
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.runs_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Canonical JSON of the settings that define a run. File paths are
    /// replaced by content digests so the value is independent of where the
    /// inputs live.
    pub fn identity(&self) -> Value {
        let digest = |p: &Option<PathBuf>| -> Value {
            match p {
                Some(p) => match std::fs::read(p) {
                    Ok(bytes) => Value::String(format!("sha256:{}", sha256_hex(&bytes))),
                    Err(_) => Value::String(format!("missing:{}", p.display())),
                },
                None => Value::Null,
            }
        };
        let mut v = BTreeMap::new();
        v.insert("seed", Value::from(self.seed));
        v.insert("kb_input", digest(&self.kb.input));
        v.insert("kb_format", serde_json::to_value(&self.kb.format).unwrap_or_default());
        v.insert("provider_kind", Value::from(self.provider.kind.clone()));
        v.insert("provider_script", digest(&self.provider.script));
        v.insert(
            "provider_url",
            serde_json::to_value(&self.provider.url).unwrap_or_default(),
        );
        v.insert("generation", serde_json::to_value(&self.generation).unwrap_or_default());
        serde_json::to_value(v).unwrap_or_default()
    }

    /// Hash over everything in the config except output locations.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).unwrap_or_default();
        if let Value::Object(map) = &mut v {
            map.remove("run_id");
            map.remove("runs_dir");
            map.insert("identity".into(), self.identity());
            for section in ["kb", "provider", "embedder", "training", "retrieval"] {
                if let Some(Value::Object(inner)) = map.get_mut(section) {
                    for key in ["input", "script", "table", "output", "queries"] {
                        inner.remove(key);
                    }
                }
            }
        }
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn run_id(&self) -> Result<String, CliError> {
        if let Some(id) = &self.run_id {
            let ok = !id.is_empty()
                && id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                && !id.starts_with('.');
            if !ok {
                return Err(CliError::config(format!(
                    "run id `{id}` may only contain letters, digits, '-', '_' and '.'"
                )));
            }
            return Ok(id.clone());
        }
        let mode = self.mode()?;
        let hash = sha256_hex(self.identity().to_string().as_bytes());
        Ok(format!("{}-{}", mode.as_str().replace('_', "-"), &hash[..10]))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn parse_counts(s: &str) -> Result<Vec<usize>, String> {
    // Accepts "10,20,30" and the range form "10..100:10".
    if let Some((range, step)) = s.split_once(':') {
        if let Some((a, b)) = range.split_once("..") {
            let (a, b, step): (usize, usize, usize) = (
                a.trim().parse().map_err(|_| format!("bad range start in `{s}`"))?,
                b.trim().parse().map_err(|_| format!("bad range end in `{s}`"))?,
                step.trim().parse().map_err(|_| format!("bad step in `{s}`"))?,
            );
            if step == 0 || a == 0 || a > b {
                return Err(format!("invalid range `{s}`"));
            }
            return Ok((a..=b).step_by(step).collect());
        }
    }
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("invalid count `{p}`")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_forms() {
        assert_eq!(parse_counts("10,20, 30").unwrap(), vec![10, 20, 30]);
        assert_eq!(parse_counts("10..100:10").unwrap().len(), 10);
        assert!(parse_counts("10,x").is_err());
        assert!(parse_counts("10..5:1").is_err());
    }

    #[test]
    fn run_id_ignores_output_locations() {
        let mut a = RunConfig::load(None).unwrap();
        let id = a.run_id().unwrap();
        let hash = a.config_hash();
        a.runs_dir = Some("elsewhere".into());
        assert_eq!(a.run_id().unwrap(), id);
        assert_eq!(a.config_hash(), hash);
        a.seed = 1;
        assert_ne!(a.run_id().unwrap(), id);
        a.run_id = Some("../x".into());
        assert!(a.run_id().is_err());
    }
}
