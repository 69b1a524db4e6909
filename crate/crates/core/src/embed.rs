//! Embedding providers for BERTScore (token vectors) and retrieval
//! (sentence vectors).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::TokenEmbeddingSet;
use crate::registry::{Registry, RegistryError};

pub const EMBED_URL_ENV: &str = "SQG_EMBED_URL";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("no vector for {0:?}")]
    Unknown(String),
    #[error("embedding request failed: {0}")]
    Request(String),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    /// One token embedding set per input text.
    fn embed_tokens(&self, texts: &[String]) -> Result<Vec<TokenEmbeddingSet>, EmbedError>;
    /// One sentence vector per input text.
    fn embed_sentences(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Vector table for `lookup`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

pub fn embedder_registry() -> Registry<dyn Embedder, EmbedderSpec> {
    let mut reg: Registry<dyn Embedder, EmbedderSpec> = Registry::new("embedder");
    reg.register("hash", |spec| {
        Ok(Box::new(HashEmbedder::new(spec.dim.unwrap_or(HashEmbedder::DEFAULT_DIM))) as Box<dyn Embedder>)
    })
    .alias("pseudo", "hash")
    .register("lookup", |spec| {
        let path = spec
            .table
            .as_ref()
            .ok_or_else(|| RegistryError::config("embedder", "lookup", "`table` path is required"))?;
        let e = LookupEmbedder::from_file(path).map_err(|e| RegistryError::config("embedder", "lookup", e))?;
        Ok(Box::new(e) as Box<dyn Embedder>)
    })
    .register("http", |spec| {
        let url = spec
            .url
            .clone()
            .or_else(|| std::env::var(EMBED_URL_ENV).ok())
            .ok_or_else(|| {
                RegistryError::config("embedder", "http", format!("`url` or ${EMBED_URL_ENV} is required"))
            })?;
        let e = HttpEmbedder::new(&url, Duration::from_secs(spec.timeout_secs.unwrap_or(60)))
            .map_err(|e| RegistryError::config("embedder", "http", e.to_string()))?;
        Ok(Box::new(e) as Box<dyn Embedder>)
    });
    reg
}

/// FNV-1a, stable across platforms and releases.
fn fnv1a(parts: &[&str]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hash ^= 0x1f;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
        for b in part.as_bytes() {
            hash ^= u64::from(*b);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    }
    hash
}

/// Deterministic offline embedder built from hashed character features.
///
/// Tokens are the non-whitespace characters of a text. A token's vector is
/// its own hashed feature plus half-weight features of the bigrams it forms
/// with its neighbours, so equal characters in different contexts get
/// related but unequal vectors. Sentence vectors sum unigram and bigram
/// features. Identical strings always produce identical vectors.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    id: String,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        let dim = dim.max(1);
        Self {
            dim,
            id: format!("hash-{dim}"),
        }
    }

    fn feature(&self, parts: &[&str]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(parts));
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn chars(text: &str) -> Vec<String> {
        text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
    }
}

fn add_scaled(acc: &mut [f64], v: &[f64], scale: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_tokens(&self, texts: &[String]) -> Result<Vec<TokenEmbeddingSet>, EmbedError> {
        texts
            .iter()
            .map(|text| {
                let chars = Self::chars(text);
                if chars.is_empty() {
                    return Err(EmbedError::EmptyText);
                }
                let vectors = (0..chars.len())
                    .map(|i| {
                        let mut v = self.feature(&["u", &chars[i]]);
                        if i > 0 {
                            add_scaled(&mut v, &self.feature(&["b", &chars[i - 1], &chars[i]]), 0.5);
                        }
                        if i + 1 < chars.len() {
                            add_scaled(&mut v, &self.feature(&["b", &chars[i], &chars[i + 1]]), 0.5);
                        }
                        v
                    })
                    .collect();
                TokenEmbeddingSet::new(chars, vectors).map_err(|e| EmbedError::Malformed(e.to_string()))
            })
            .collect()
    }

    fn embed_sentences(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        texts
            .iter()
            .map(|text| {
                let chars = Self::chars(text);
                if chars.is_empty() {
                    return Err(EmbedError::EmptyText);
                }
                let mut v = vec![0.0; self.dim];
                for c in &chars {
                    add_scaled(&mut v, &self.feature(&["u", c]), 1.0);
                }
                for w in chars.windows(2) {
                    add_scaled(&mut v, &self.feature(&["b", &w[0], &w[1]]), 1.0);
                }
                Ok(v)
            })
            .collect()
    }
}

/// Embedder backed by a fixed text → vector table.
///
/// Token sets hold a single token (the whole text). Unknown texts are an
/// error. The table file is a JSON object mapping text to an array of
/// numbers.
#[derive(Debug, Clone, Default)]
pub struct LookupEmbedder {
    table: HashMap<String, Vec<f64>>,
}

impl LookupEmbedder {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        Self {
            table: entries.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let table: HashMap<String, Vec<f64>> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self { table })
    }

    fn get(&self, text: &str) -> Result<&Vec<f64>, EmbedError> {
        self.table
            .get(text)
            .ok_or_else(|| EmbedError::Unknown(text.to_string()))
    }
}

impl Embedder for LookupEmbedder {
    fn id(&self) -> &str {
        "lookup"
    }

    fn embed_tokens(&self, texts: &[String]) -> Result<Vec<TokenEmbeddingSet>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                TokenEmbeddingSet::new(vec![t.clone()], vec![self.get(t)?.clone()])
                    .map_err(|e| EmbedError::Malformed(e.to_string()))
            })
            .collect()
    }

    fn embed_sentences(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        texts.iter().map(|t| self.get(t).cloned()).collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
    granularity: &'a str,
}

#[derive(Deserialize)]
struct TokenEmbedResponse {
    #[serde(default)]
    tokens: Option<Vec<Vec<String>>>,
    vectors: Vec<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
struct SentenceEmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for `POST {base}/v1/embed`.
#[derive(Debug)]
pub struct HttpEmbedder {
    id: String,
    endpoint: String,
    client: reqwest::blocking::Client,
    batch_size: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::Request(e.to_string()))?;
        let base = base_url.trim_end_matches('/');
        Ok(Self {
            id: format!("http:{base}"),
            endpoint: format!("{base}/v1/embed"),
            client,
            batch_size: 64,
        })
    }

    fn post<T: serde::de::DeserializeOwned>(&self, texts: &[String], granularity: &str) -> Result<T, EmbedError> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest { texts, granularity })
            .send()
            .map_err(|e| EmbedError::Request(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(EmbedError::Request(format!("HTTP {}", status.as_u16())));
        }
        response.json().map_err(|e| EmbedError::Malformed(e.to_string()))
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_tokens(&self, texts: &[String]) -> Result<Vec<TokenEmbeddingSet>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let body: TokenEmbedResponse = self.post(chunk, "token")?;
            if body.vectors.len() != chunk.len() {
                return Err(EmbedError::Malformed(format!(
                    "{} vector sets for {} texts",
                    body.vectors.len(),
                    chunk.len()
                )));
            }
            let tokens = body.tokens.unwrap_or_else(|| {
                body.vectors
                    .iter()
                    .map(|vs| (0..vs.len()).map(|i| format!("#{i}")).collect())
                    .collect()
            });
            for (toks, vecs) in tokens.into_iter().zip(body.vectors) {
                out.push(TokenEmbeddingSet::new(toks, vecs).map_err(|e| EmbedError::Malformed(e.to_string()))?);
            }
        }
        Ok(out)
    }

    fn embed_sentences(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let body: SentenceEmbedResponse = self.post(chunk, "sentence")?;
            if body.vectors.len() != chunk.len() {
                return Err(EmbedError::Malformed(format!(
                    "{} vectors for {} texts",
                    body.vectors.len(),
                    chunk.len()
                )));
            }
            out.extend(body.vectors);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn hash_embedder_is_deterministic() {
        let e = HashEmbedder::new(16);
        let a = e.embed_tokens(&s(&["证明 要多久"])).unwrap();
        let b = HashEmbedder::new(16).embed_tokens(&s(&["证明 要多久"])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].tokens, s(&["证", "明", "要", "多", "久"]));
        assert_eq!(a[0].vectors[0].len(), 16);
        assert_eq!(
            e.embed_sentences(&s(&["abc"])).unwrap(),
            e.embed_sentences(&s(&["abc"])).unwrap()
        );
        assert_eq!(e.embed_tokens(&s(&["  "])).unwrap_err(), EmbedError::EmptyText);
    }

    #[test]
    fn context_changes_token_vectors() {
        let e = HashEmbedder::new(8);
        let x = e.embed_tokens(&s(&["ab", "cb"])).unwrap();
        assert_ne!(x[0].vectors[1], x[1].vectors[1]);
    }

    #[test]
    fn lookup_unknown_is_error() {
        let e = LookupEmbedder::new([("a", vec![1.0, 0.0])]);
        assert_eq!(e.embed_sentences(&s(&["a"])).unwrap(), vec![vec![1.0, 0.0]]);
        assert!(matches!(e.embed_sentences(&s(&["b"])), Err(EmbedError::Unknown(_))));
    }

    #[test]
    fn registry_names() {
        let reg = embedder_registry();
        let e = reg
            .create(
                "pseudo",
                &EmbedderSpec {
                    kind: "hash".into(),
                    dim: Some(4),
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(e.id(), "hash-4");
        assert!(reg.create("lookup", &EmbedderSpec::default()).is_err());
    }
}
