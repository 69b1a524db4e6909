//! Completion providers: the scripted offline mock and the HTTP client.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::SamplingParams;
use crate::registry::{Registry, RegistryError};

pub const PROVIDER_URL_ENV: &str = "SQG_PROVIDER_URL";
pub const PROVIDER_TOKEN_ENV: &str = "SQG_PROVIDER_TOKEN";

/// A text-completion backend.
///
/// Implementations must look stateless to the caller: the response to a
/// request may depend on the prompt and the sampling parameters only.
pub trait CompletionProvider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, ProviderError>;
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for Box<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, ProviderError> {
        (**self).complete(prompt, params)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response has no `text` field")]
    MissingText,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no scripted response matches prompt {0:?}")]
    NoScript(String),
}

/// Provider selection as it appears in run configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub kind: String,
    /// Mock script file (`mock`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Base URL (`http`); falls back to `SQG_PROVIDER_URL`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Never serialized; read from `SQG_PROVIDER_TOKEN` when absent.
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

/// Registry with the built-in `mock` and `http` providers.
pub fn provider_registry() -> Registry<dyn CompletionProvider, ProviderSpec> {
    let mut reg: Registry<dyn CompletionProvider, ProviderSpec> = Registry::new("provider");
    reg.register("mock", |spec| {
        let path = spec
            .script
            .as_ref()
            .ok_or_else(|| RegistryError::config("provider", "mock", "`script` path is required"))?;
        let provider =
            ScriptedProvider::from_file(path).map_err(|e| RegistryError::config("provider", "mock", e.to_string()))?;
        Ok(Box::new(provider) as Box<dyn CompletionProvider>)
    })
    .alias("scripted", "mock")
    .register("http", |spec| {
        let url = spec
            .url
            .clone()
            .or_else(|| std::env::var(PROVIDER_URL_ENV).ok())
            .ok_or_else(|| {
                RegistryError::config("provider", "http", format!("`url` or ${PROVIDER_URL_ENV} is required"))
            })?;
        let token = spec.token.clone().or_else(|| std::env::var(PROVIDER_TOKEN_ENV).ok());
        let timeout = Duration::from_secs(spec.timeout_secs.unwrap_or(60));
        let provider = HttpProvider::new(&url, token, timeout)
            .map_err(|e| RegistryError::config("provider", "http", e.to_string()))?;
        Ok(Box::new(provider) as Box<dyn CompletionProvider>)
    });
    reg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Prefix,
}

/// One line of a mock script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub kind: MatchKind,
    pub prompt: String,
    pub responses: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("{path}: line {line}: {message}")]
    Invalid { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Offline provider answering from a script of canned responses.
///
/// Exact rules win over prefix rules; among prefix rules the longest match
/// wins, then file order. A rule's responses are consumed round-robin. When
/// the request carries a seed, the response index is `seed mod len`
/// instead, which keeps concurrent callers deterministic.
#[derive(Debug)]
pub struct ScriptedProvider {
    id: String,
    rules: Vec<ScriptRule>,
    cursors: Vec<AtomicUsize>,
    log: Mutex<Vec<(String, SamplingParams)>>,
}

impl ScriptedProvider {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let cursors = rules.iter().map(|_| AtomicUsize::new(0)).collect();
        Self {
            id: "mock".to_string(),
            rules,
            cursors,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn from_file(path: &Path) -> Result<Self, ScriptError> {
        let reader = BufReader::new(File::open(path)?);
        let mut rules = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let invalid = |message: String| ScriptError::Invalid {
                path: path.display().to_string(),
                line: idx + 1,
                message,
            };
            let rule: ScriptRule = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
            if rule.responses.is_empty() {
                return Err(invalid("rule has no responses".into()));
            }
            rules.push(rule);
        }
        Ok(Self::new(rules))
    }

    /// Every request received so far, in arrival order.
    pub fn call_log(&self) -> Vec<(String, SamplingParams)> {
        self.log.lock().expect("log poisoned").clone()
    }

    fn find(&self, prompt: &str) -> Option<usize> {
        self.rules
            .iter()
            .position(|r| r.kind == MatchKind::Exact && r.prompt == prompt)
            .or_else(|| {
                self.rules
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.kind == MatchKind::Prefix && prompt.starts_with(&r.prompt))
                    .max_by(|(ia, a), (ib, b)| a.prompt.len().cmp(&b.prompt.len()).then(ib.cmp(ia)))
                    .map(|(i, _)| i)
            })
    }
}

impl CompletionProvider for ScriptedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, ProviderError> {
        self.log
            .lock()
            .expect("log poisoned")
            .push((prompt.to_string(), params.clone()));
        let idx = self
            .find(prompt)
            .ok_or_else(|| ProviderError::NoScript(prompt.to_string()))?;
        let responses = &self.rules[idx].responses;
        let slot = match params.seed {
            Some(seed) => (seed % responses.len() as u64) as usize,
            None => self.cursors[idx].fetch_add(1, Ordering::SeqCst) % responses.len(),
        };
        Ok(responses[slot].clone())
    }
}

#[derive(Serialize)]
struct CompleteRequest<'a> {
    prompt: &'a str,
    #[serde(flatten)]
    params: &'a SamplingParams,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: Option<String>,
}

/// Client for `POST {base}/v1/complete`.
#[derive(Debug)]
pub struct HttpProvider {
    id: String,
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(base_url: &str, token: Option<String>, timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let base = base_url.trim_end_matches('/');
        Ok(Self {
            id: format!("http:{base}"),
            endpoint: format!("{base}/v1/complete"),
            token,
            client,
        })
    }
}

impl CompletionProvider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, ProviderError> {
        let mut request = self
            .client
            .post(&self.endpoint)
            .json(&CompleteRequest { prompt, params });
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(classify)?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(ProviderError::Status {
                status: status.as_u16(),
                body,
            });
        }
        let body: CompleteResponse = response.json().map_err(|e| {
            if e.is_decode() {
                ProviderError::MissingText
            } else {
                classify(e)
            }
        })?;
        body.text.ok_or(ProviderError::MissingText)
    }
}

fn classify(e: reqwest::Error) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout(e.to_string())
    } else {
        ProviderError::Transport(e.to_string())
    }
}
