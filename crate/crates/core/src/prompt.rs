//! Prompt templates and fine-tuning sample construction.
//!
//! Three templates exist, one per generation mode. The one-to-one template
//! is a fixed rewrite instruction with the source question as input; the two
//! batch templates embed the source question (and, for intention-enhanced,
//! the answer) in the instruction and ask for `K` questions at once.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kb::KnowledgeBase;

pub const ONE_TO_ONE_INSTRUCTION: &str = "将输入的句子改写为保持相同意义但表述不同的新句子。";
const CONTEXT_AWARE_PATTERN: &str = "帮我生成{K}条与{question}相似的问句。";
const INTENTION_ENHANCED_PATTERN: &str = "帮我根据问题{question}和答案{answer}，生成{K}个不同且意思相近的问题。";

/// Default targets per batch sample and questions per batch call.
pub const DEFAULT_BATCH_SIZE: usize = 20;
/// Yields roughly 90K samples from a 3K-pair knowledge base.
pub const DEFAULT_SAMPLES_PER_PAIR: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OneToOne,
    ContextAware,
    IntentionEnhanced,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::OneToOne, Mode::ContextAware, Mode::IntentionEnhanced];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::OneToOne => "one_to_one",
            Mode::ContextAware => "context_aware",
            Mode::IntentionEnhanced => "intention_enhanced",
        }
    }

    /// Human-readable method name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Mode::OneToOne => "One-to-One",
            Mode::ContextAware => "Context-Aware",
            Mode::IntentionEnhanced => "Intention-Enhanced",
        }
    }

    pub fn is_batch(self) -> bool {
        !matches!(self, Mode::OneToOne)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "one_to_one" | "one" | "o2o" => Ok(Mode::OneToOne),
            "context_aware" | "context" => Ok(Mode::ContextAware),
            "intention_enhanced" | "intention" => Ok(Mode::IntentionEnhanced),
            _ => Err(PromptError::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unknown mode `{0}` (expected one_to_one, context_aware or intention_enhanced)")]
    UnknownMode(String),
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("intention_enhanced prompts require an answer")]
    MissingAnswer,
    #[error("question count K must be at least 1")]
    InvalidCount,
    #[error("targets per sample L must be at least 1")]
    InvalidTargetCount,
    #[error("no pair has enough questions for {paradigm} with L={targets}")]
    NoUsablePairs { paradigm: Mode, targets: usize },
    #[error("refusing to export an empty sample list")]
    EmptyExport,
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An instruction plus optional input, as sent to a model or written to a
/// fine-tuning file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub instruction: String,
    pub input: String,
}

impl RenderedPrompt {
    /// Flattened text for completion endpoints that take a single prompt.
    pub fn text(&self) -> String {
        if self.input.is_empty() {
            self.instruction.clone()
        } else {
            format!("{}\n{}", self.instruction, self.input)
        }
    }
}

pub fn render_prompt(
    mode: Mode,
    question: &str,
    answer: Option<&str>,
    count: usize,
) -> Result<RenderedPrompt, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    match mode {
        Mode::OneToOne => Ok(RenderedPrompt {
            instruction: ONE_TO_ONE_INSTRUCTION.to_string(),
            input: question.to_string(),
        }),
        Mode::ContextAware => {
            if count == 0 {
                return Err(PromptError::InvalidCount);
            }
            Ok(RenderedPrompt {
                instruction: CONTEXT_AWARE_PATTERN.replacen("{K}", &count.to_string(), 1).replacen(
                    "{question}",
                    question,
                    1,
                ),
                input: String::new(),
            })
        }
        Mode::IntentionEnhanced => {
            let answer = answer
                .filter(|a| !a.trim().is_empty())
                .ok_or(PromptError::MissingAnswer)?;
            if count == 0 {
                return Err(PromptError::InvalidCount);
            }
            // Substitute the question last-but-one so an answer containing
            // "{K}" or "{question}" is left intact.
            let (head, tail) = INTENTION_ENHANCED_PATTERN
                .split_once("{answer}")
                .expect("pattern has an answer slot");
            Ok(RenderedPrompt {
                instruction: format!(
                    "{}{}{}",
                    head.replacen("{question}", question, 1),
                    answer,
                    tail.replacen("{K}", &count.to_string(), 1)
                ),
                input: String::new(),
            })
        }
    }
}

/// Formats target questions as a numbered list, one per line.
pub fn join_targets<S: AsRef<str>>(targets: &[S]) -> String {
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplesPerPair {
    /// Every ordered pair (one-to-one) or one sample per input question (batch).
    All,
    Count(usize),
}

impl Default for SamplesPerPair {
    fn default() -> Self {
        SamplesPerPair::Count(DEFAULT_SAMPLES_PER_PAIR)
    }
}

impl FromStr for SamplesPerPair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(SamplesPerPair::All);
        }
        s.parse::<usize>()
            .map(SamplesPerPair::Count)
            .map_err(|_| format!("expected `all` or a count, got `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub sample_id: String,
    pub pair_id: String,
    pub paradigm: Mode,
    pub instruction: String,
    pub input: String,
    pub output: String,
    /// The question the sample was built from; for batch paradigms it lives
    /// inside `instruction` rather than `input`.
    pub source_question: String,
    pub targets: Vec<String>,
}

impl TrainingSample {
    pub fn record(&self) -> FinetuneRecord {
        FinetuneRecord {
            instruction: self.instruction.clone(),
            input: self.input.clone(),
            output: self.output.clone(),
        }
    }
}

/// One line of an instruction-tuning JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingConfig {
    pub paradigm: Mode,
    /// Targets per batch sample; ignored for one-to-one.
    pub targets: usize,
    pub samples_per_pair: SamplesPerPair,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            paradigm: Mode::ContextAware,
            targets: DEFAULT_BATCH_SIZE,
            samples_per_pair: SamplesPerPair::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
    pub skipped_pairs: Vec<String>,
}

/// Builds fine-tuning samples from every usable pair of `kb`.
///
/// One-to-one samples are ordered question pairs `(q_i, q_j)`, `i != j`.
/// Batch samples take input `q_i` (cycling through the pair in order) and
/// `L` distinct other questions of the same pair as targets, sampled without
/// replacement and kept in pair order.
pub fn build_training_samples(kb: &KnowledgeBase, config: &TrainingConfig) -> Result<TrainingSet, PromptError> {
    let paradigm = config.paradigm;
    if paradigm.is_batch() && config.targets == 0 {
        return Err(PromptError::InvalidTargetCount);
    }
    let min_questions = if paradigm.is_batch() { config.targets + 1 } else { 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut set = TrainingSet::default();

    for pair in &kb.pairs {
        let questions = &pair.questions;
        if questions.len() < min_questions {
            log::warn!(
                "skipping pair {}: {} questions, {} needs at least {}",
                pair.pair_id,
                questions.len(),
                paradigm,
                min_questions
            );
            set.skipped_pairs.push(pair.pair_id.clone());
            continue;
        }
        let k = questions.len();
        let mut push = |s: usize, input_idx: usize, target_idx: &[usize]| {
            let source = &questions[input_idx];
            let targets: Vec<String> = target_idx.iter().map(|&j| questions[j].clone()).collect();
            let (prompt, output) = match paradigm {
                Mode::OneToOne => (
                    render_prompt(paradigm, source, None, 1).expect("validated pair"),
                    targets[0].clone(),
                ),
                _ => (
                    render_prompt(paradigm, source, Some(&pair.answer), targets.len()).expect("validated pair"),
                    join_targets(&targets),
                ),
            };
            set.samples.push(TrainingSample {
                sample_id: format!("{}#{}", pair.pair_id, s),
                pair_id: pair.pair_id.clone(),
                paradigm,
                instruction: prompt.instruction,
                input: prompt.input,
                output,
                source_question: source.clone(),
                targets,
            });
        };

        match paradigm {
            Mode::OneToOne => {
                let total = k * (k - 1);
                let count = match config.samples_per_pair {
                    SamplesPerPair::All => total,
                    SamplesPerPair::Count(c) => c.min(total),
                };
                if count == total {
                    let mut s = 0;
                    for i in 0..k {
                        for j in (0..k).filter(|&j| j != i) {
                            push(s, i, &[j]);
                            s += 1;
                        }
                    }
                } else {
                    // Per-input shuffled target lists; sample s takes input
                    // s mod k and that input's (s / k)-th target, so no
                    // ordered pair repeats.
                    let orders: Vec<Vec<usize>> = (0..k)
                        .map(|i| {
                            let mut others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
                            others.shuffle(&mut rng);
                            others
                        })
                        .collect();
                    for s in 0..count {
                        let i = s % k;
                        push(s, i, &[orders[i][s / k]]);
                    }
                }
            }
            Mode::ContextAware | Mode::IntentionEnhanced => {
                let count = match config.samples_per_pair {
                    SamplesPerPair::All => k,
                    SamplesPerPair::Count(c) => c,
                };
                for s in 0..count {
                    let i = s % k;
                    let others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
                    let mut picked: Vec<usize> = others.choose_multiple(&mut rng, config.targets).copied().collect();
                    picked.sort_unstable();
                    push(s, i, &picked);
                }
            }
        }
    }

    if set.samples.is_empty() {
        return Err(PromptError::NoUsablePairs {
            paradigm,
            targets: config.targets,
        });
    }
    Ok(set)
}

/// Writes one `{"instruction", "input", "output"}` object per line.
pub fn export_finetune_jsonl(samples: &[TrainingSample], path: &Path) -> Result<(), PromptError> {
    if samples.is_empty() {
        return Err(PromptError::EmptyExport);
    }
    let mut out = BufWriter::new(File::create(path)?);
    for sample in samples {
        serde_json::to_writer(&mut out, &sample.record()).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_finetune_jsonl(path: &Path) -> Result<Vec<FinetuneRecord>, PromptError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|source| PromptError::Parse { line: idx + 1, source })?);
    }
    Ok(records)
}
