//! Question generation against a completion provider.
//!
//! Three strategies share the same plumbing: prompts are rendered from the
//! mode's template, provider calls run concurrently up to a parallelism
//! bound, responses are reassembled in request order, parsed, and
//! deduplicated against the source question.

mod parse;
mod provider;
mod strategy;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::kb::QAPair;
use crate::prompt::{self, Mode, PromptError, DEFAULT_BATCH_SIZE};

pub use parse::{dedup, parse_multi_question, parse_single_question, strip_marker, ParseError, ParsedQuestions};
pub use provider::{
    provider_registry, CompletionProvider, HttpProvider, MatchKind, ProviderError, ProviderSpec, ScriptError,
    ScriptRule, ScriptedProvider, PROVIDER_TOKEN_ENV, PROVIDER_URL_ENV,
};
pub use strategy::{
    strategy_registry, ContextAwareStrategy, GenerationStrategy, IntentionEnhancedStrategy, OneToOneStrategy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    /// Temperature 0.9 and top-k 5, the settings used for the
    /// similarity-model baselines.
    fn default() -> Self {
        Self {
            temperature: 0.9,
            top_k: Some(5),
            top_p: None,
            max_tokens: 1024,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |msg: &str| Err(GenerateError::InvalidParams(msg.to_string()));
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be a finite value >= 0");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be >= 1");
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return bad("top_p must be in (0, 1]");
            }
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        Ok(())
    }

    /// Parameters for call `index` of a batch: the seed, if any, is offset so
    /// repeated calls with the same prompt can differ.
    pub fn for_call(&self, index: usize) -> SamplingParams {
        SamplingParams {
            seed: self.seed.map(|s| s.wrapping_add(index as u64)),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOptions {
    /// Maximum concurrent provider calls.
    pub parallelism: usize,
    /// Questions requested per batch call are clamped to this.
    pub max_k_per_call: usize,
    /// Call budget as a multiple of the minimum call count.
    pub retry_factor: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            parallelism: 4,
            max_k_per_call: DEFAULT_BATCH_SIZE,
            retry_factor: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Unique questions wanted.
    pub n: usize,
    /// Questions asked for per batch call; ignored for one-to-one.
    pub k_per_call: usize,
    pub params: SamplingParams,
    #[serde(default)]
    pub options: GenerationOptions,
}

impl GenerationRequest {
    pub fn new(n: usize, k_per_call: usize, params: SamplingParams) -> Self {
        Self {
            n,
            k_per_call,
            params,
            options: GenerationOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Timeout,
    Http,
    MissingText,
    Transport,
    NoScript,
    EmptyResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallFailure {
    pub call: usize,
    pub kind: FailureKind,
    pub message: String,
}

impl CallFailure {
    fn from_provider(call: usize, err: &ProviderError) -> Self {
        let kind = match err {
            ProviderError::Timeout(_) => FailureKind::Timeout,
            ProviderError::Status { .. } => FailureKind::Http,
            ProviderError::MissingText => FailureKind::MissingText,
            ProviderError::Transport(_) => FailureKind::Transport,
            ProviderError::NoScript(_) => FailureKind::NoScript,
        };
        Self {
            call,
            kind,
            message: err.to_string(),
        }
    }

    fn empty(call: usize, raw: &str) -> Self {
        Self {
            call,
            kind: FailureKind::EmptyResponse,
            message: format!("no question in response {raw:?}"),
        }
    }
}

/// A call whose parsed item count differed from the requested `K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDeviation {
    pub call: usize,
    pub expected: usize,
    pub got: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchTiming {
    pub started_at: Option<DateTime<Utc>>,
    pub elapsed_ms: u128,
}

/// Questions generated for one source pair, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationBatch {
    pub pair_id: String,
    pub mode: Mode,
    pub source_question: String,
    pub requested: usize,
    pub k_per_call: usize,
    pub provider_id: String,
    pub sampling: SamplingParams,
    pub calls: usize,
    pub raw_responses: Vec<String>,
    pub questions: Vec<String>,
    #[serde(default)]
    pub failures: Vec<CallFailure>,
    #[serde(default)]
    pub parse_deviations: Vec<ParseDeviation>,
    /// Fewer than `requested` unique questions were obtained.
    pub underfilled: bool,
    /// Kept out of serialized batches so reruns are byte-identical.
    #[serde(skip)]
    pub timing: BatchTiming,
}

impl GenerationBatch {
    #[cfg(test)]
    pub(crate) fn for_test(pair_id: &str, mode: Mode, questions: &[&str]) -> Self {
        Self {
            pair_id: pair_id.to_string(),
            mode,
            source_question: String::new(),
            requested: questions.len(),
            k_per_call: questions.len(),
            provider_id: "test".into(),
            sampling: SamplingParams::default(),
            calls: 1,
            raw_responses: Vec::new(),
            questions: questions.iter().map(|s| s.to_string()).collect(),
            failures: Vec::new(),
            parse_deviations: Vec::new(),
            underfilled: false,
            timing: BatchTiming::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("requested count n must be at least 1")]
    InvalidCount,
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("all {} provider calls failed: {}", .failures.len(), summarize(.failures))]
    AllCallsFailed {
        pair_id: String,
        failures: Vec<CallFailure>,
    },
}

fn summarize(failures: &[CallFailure]) -> String {
    failures
        .iter()
        .map(|f| format!("#{} {}", f.call, f.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Issues every request concurrently (at most `parallelism` in flight) and
/// returns results in request order.
pub fn run_calls(
    provider: &dyn CompletionProvider,
    requests: &[(String, SamplingParams)],
    parallelism: usize,
) -> Vec<Result<String, ProviderError>> {
    let slots: Vec<Mutex<Option<Result<String, ProviderError>>>> = requests.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = parallelism.clamp(1, requests.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((prompt, params)) = requests.get(i) else {
                    break;
                };
                let result = provider.complete(prompt, params);
                *slots[i].lock().expect("slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot poisoned").expect("every request ran"))
        .collect()
}

fn new_batch(
    pair: &QAPair,
    mode: Mode,
    provider: &dyn CompletionProvider,
    req: &GenerationRequest,
    k: usize,
) -> GenerationBatch {
    GenerationBatch {
        pair_id: pair.pair_id.clone(),
        mode,
        source_question: pair.source_question().to_string(),
        requested: req.n,
        k_per_call: k,
        provider_id: provider.id().to_string(),
        sampling: req.params.clone(),
        calls: 0,
        raw_responses: Vec::new(),
        questions: Vec::new(),
        failures: Vec::new(),
        parse_deviations: Vec::new(),
        underfilled: false,
        timing: BatchTiming {
            started_at: Some(Utc::now()),
            elapsed_ms: 0,
        },
    }
}

/// Issues `n` independent one-to-one completions for the pair's source
/// question and keeps the unique results.
pub fn generate_one_to_one(
    provider: &dyn CompletionProvider,
    pair: &QAPair,
    req: &GenerationRequest,
) -> Result<GenerationBatch, GenerateError> {
    if req.n == 0 {
        return Err(GenerateError::InvalidCount);
    }
    req.params.validate()?;
    let started = Instant::now();
    let source = pair.source_question();
    let prompt = prompt::render_prompt(Mode::OneToOne, source, None, 1)?.text();
    let mut batch = new_batch(pair, Mode::OneToOne, provider, req, 1);

    let requests: Vec<_> = (0..req.n).map(|i| (prompt.clone(), req.params.for_call(i))).collect();
    let results = run_calls(provider, &requests, req.options.parallelism);
    batch.calls = results.len();
    let mut parsed = Vec::new();
    for (call, result) in results.into_iter().enumerate() {
        match result {
            Ok(raw) => {
                match parse_single_question(&raw) {
                    Ok(q) => parsed.push(q),
                    Err(_) => batch.failures.push(CallFailure::empty(call, &raw)),
                }
                batch.raw_responses.push(raw);
            }
            Err(e) => batch.failures.push(CallFailure::from_provider(call, &e)),
        }
    }
    if batch.failures.len() == batch.calls {
        return Err(GenerateError::AllCallsFailed {
            pair_id: pair.pair_id.clone(),
            failures: batch.failures,
        });
    }
    batch.questions = dedup(&parsed, Some(source));
    batch.questions.truncate(req.n);
    batch.underfilled = batch.questions.len() < req.n;
    batch.timing.elapsed_ms = started.elapsed().as_millis();
    Ok(batch)
}

/// Repeats batch calls of `k_per_call` questions until `n` unique questions
/// are collected or the call budget (`retry_factor` × ⌈n / k⌉) is spent.
pub fn generate_batch(
    provider: &dyn CompletionProvider,
    pair: &QAPair,
    mode: Mode,
    req: &GenerationRequest,
) -> Result<GenerationBatch, GenerateError> {
    if req.n == 0 {
        return Err(GenerateError::InvalidCount);
    }
    if !mode.is_batch() {
        return generate_one_to_one(provider, pair, req);
    }
    req.params.validate()?;
    let started = Instant::now();
    let mut k = req.k_per_call.max(1);
    if k > req.options.max_k_per_call {
        log::warn!(
            "k_per_call {} exceeds the cap of {}; clamping",
            k,
            req.options.max_k_per_call
        );
        k = req.options.max_k_per_call.max(1);
    }
    let source = pair.source_question();
    let prompt = prompt::render_prompt(mode, source, Some(&pair.answer), k)?.text();
    let mut batch = new_batch(pair, mode, provider, req, k);

    let min_calls = req.n.div_ceil(k);
    let budget = min_calls * req.options.retry_factor.max(1);
    let mut collected: Vec<String> = Vec::new();
    let mut any_success = false;

    while collected.len() < req.n && batch.calls < budget {
        let missing = req.n - collected.len();
        let round = missing.div_ceil(k).min(budget - batch.calls);
        let requests: Vec<_> = (batch.calls..batch.calls + round)
            .map(|i| (prompt.clone(), req.params.for_call(i)))
            .collect();
        let results = run_calls(provider, &requests, req.options.parallelism);
        for (offset, result) in results.into_iter().enumerate() {
            let call = batch.calls + offset;
            match result {
                Ok(raw) => {
                    match parse_multi_question(&raw, k) {
                        Ok(parsed) => {
                            any_success = true;
                            if parsed.deviates() {
                                batch.parse_deviations.push(ParseDeviation {
                                    call,
                                    expected: k,
                                    got: parsed.questions.len(),
                                });
                            }
                            collected.extend(parsed.questions);
                            collected = dedup(&collected, Some(source));
                        }
                        Err(_) => batch.failures.push(CallFailure::empty(call, &raw)),
                    }
                    batch.raw_responses.push(raw);
                }
                Err(e) => batch.failures.push(CallFailure::from_provider(call, &e)),
            }
        }
        batch.calls += round;
    }

    if !any_success {
        return Err(GenerateError::AllCallsFailed {
            pair_id: pair.pair_id.clone(),
            failures: batch.failures,
        });
    }
    collected.truncate(req.n);
    batch.underfilled = collected.len() < req.n;
    if batch.underfilled {
        log::warn!(
            "pair {}: only {} of {} unique questions after {} calls",
            pair.pair_id,
            collected.len(),
            req.n,
            batch.calls
        );
    }
    batch.questions = collected;
    batch.timing.elapsed_ms = started.elapsed().as_millis();
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<&'static str>, AtomicUsize);

    impl CompletionProvider for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
        fn complete(&self, _: &str, _: &SamplingParams) -> Result<String, ProviderError> {
            let i = self.1.fetch_add(1, Ordering::SeqCst);
            Ok(self.0[i % self.0.len()].to_string())
        }
    }

    struct Timeouts;

    impl CompletionProvider for Timeouts {
        fn id(&self) -> &str {
            "timeouts"
        }
        fn complete(&self, _: &str, _: &SamplingParams) -> Result<String, ProviderError> {
            Err(ProviderError::Timeout("deadline exceeded".into()))
        }
    }

    /// Returns `count` lines numbered from a per-call offset taken from the seed.
    struct Fresh {
        count: usize,
        calls: AtomicUsize,
    }

    impl CompletionProvider for Fresh {
        fn id(&self) -> &str {
            "fresh"
        }
        fn complete(&self, _: &str, params: &SamplingParams) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let base = params.seed.unwrap() as usize * self.count;
            Ok((0..self.count)
                .map(|i| format!("{}. 问题{}", i + 1, base + i))
                .collect::<Vec<_>>()
                .join("\n"))
        }
    }

    fn pair() -> QAPair {
        QAPair::new("p", "答案", ["源问题"]).unwrap()
    }

    fn serial(n: usize, k: usize) -> GenerationRequest {
        let mut r = GenerationRequest::new(n, k, SamplingParams::default());
        r.options.parallelism = 1;
        r
    }

    #[test]
    fn one_to_one_dedups() {
        let provider = Fixed(vec!["A", "B", "A"], AtomicUsize::new(0));
        let batch = generate_one_to_one(&provider, &pair(), &serial(3, 1)).unwrap();
        assert_eq!(batch.questions, vec!["A", "B"]);
        assert_eq!(batch.calls, 3);
        assert!(batch.underfilled);

        let provider = Fixed(vec!["A"], AtomicUsize::new(0));
        let batch = generate_one_to_one(&provider, &pair(), &serial(1, 1)).unwrap();
        assert_eq!(batch.questions, vec!["A"]);
        assert!(!batch.underfilled);
    }

    #[test]
    fn all_timeouts_is_an_error() {
        match generate_one_to_one(&Timeouts, &pair(), &serial(5, 1)) {
            Err(GenerateError::AllCallsFailed { failures, .. }) => {
                assert_eq!(failures.len(), 5);
                assert!(failures.iter().all(|f| f.kind == FailureKind::Timeout));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            generate_batch(&Timeouts, &pair(), Mode::ContextAware, &serial(5, 20)),
            Err(GenerateError::AllCallsFailed { .. })
        ));
    }

    #[test]
    fn empty_response_counts_as_failure() {
        let provider = Fixed(vec!["  ", "X"], AtomicUsize::new(0));
        let batch = generate_one_to_one(&provider, &pair(), &serial(2, 1)).unwrap();
        assert_eq!(batch.questions, vec!["X"]);
        assert_eq!(batch.failures.len(), 1);
        assert_eq!(batch.failures[0].kind, FailureKind::EmptyResponse);
    }

    #[test]
    fn twenty_in_one_call() {
        let provider = Fresh {
            count: 20,
            calls: AtomicUsize::new(0),
        };
        let mut req = serial(20, 20);
        req.params.seed = Some(0);
        let batch = generate_batch(&provider, &pair(), Mode::IntentionEnhanced, &req).unwrap();
        assert_eq!(batch.questions.len(), 20);
        assert_eq!(batch.calls, 1);
        assert!(!batch.underfilled);
    }

    #[test]
    fn hundred_in_five_calls() {
        let provider = Fresh {
            count: 20,
            calls: AtomicUsize::new(0),
        };
        let mut req = GenerationRequest::new(100, 20, SamplingParams::default());
        req.params.seed = Some(0);
        let batch = generate_batch(&provider, &pair(), Mode::ContextAware, &req).unwrap();
        assert_eq!(batch.questions.len(), 100);
        assert_eq!(batch.calls, 5);
        assert_eq!(provider.calls.load(Ordering::SeqCst), 5);
        // generation order preserved across concurrently issued calls
        let expected: Vec<String> = (0..100).map(|i| format!("问题{i}")).collect();
        assert_eq!(batch.questions, expected);
    }

    #[test]
    fn saturated_provider_underfills() {
        let provider = Fixed(vec!["1. A\n2. B\n3. C"], AtomicUsize::new(0));
        let batch = generate_batch(&provider, &pair(), Mode::ContextAware, &serial(5, 20)).unwrap();
        assert_eq!(batch.questions, vec!["A", "B", "C"]);
        assert!(batch.underfilled);
        assert_eq!(batch.calls, 3);
        assert_eq!(batch.parse_deviations.len(), 3);
    }

    #[test]
    fn source_question_never_returned() {
        let provider = Fixed(vec!["1. 源问题\n2. 新问题"], AtomicUsize::new(0));
        let batch = generate_batch(&provider, &pair(), Mode::ContextAware, &serial(1, 2)).unwrap();
        assert_eq!(batch.questions, vec!["新问题"]);
    }

    #[test]
    fn k_is_clamped() {
        let provider = Fresh {
            count: 20,
            calls: AtomicUsize::new(0),
        };
        let mut req = serial(20, 50);
        req.params.seed = Some(1);
        let batch = generate_batch(&provider, &pair(), Mode::ContextAware, &req).unwrap();
        assert_eq!(batch.k_per_call, 20);
    }

    #[test]
    fn invalid_params() {
        let provider = Fixed(vec!["A"], AtomicUsize::new(0));
        let mut req = serial(1, 1);
        req.params.top_k = Some(0);
        assert!(matches!(
            generate_one_to_one(&provider, &pair(), &req),
            Err(GenerateError::InvalidParams(_))
        ));
        assert!(matches!(
            generate_one_to_one(&provider, &pair(), &serial(0, 1)),
            Err(GenerateError::InvalidCount)
        ));
    }

    #[test]
    fn wire_shape_of_params() {
        let p = SamplingParams {
            temperature: 0.9,
            top_k: Some(5),
            top_p: None,
            max_tokens: 64,
            seed: None,
        };
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"temperature":0.9,"top_k":5,"max_tokens":64}"#
        );
    }
}
