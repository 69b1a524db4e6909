//! Knowledge-base data model, ingestion and JSONL persistence.
//!
//! A knowledge base is an ordered list of [`QAPair`]s. Each pair holds one
//! answer and the phrasings that map to it; the first phrasing is the source
//! question fed to generation. Generated candidates are carried alongside the
//! source questions with a review status.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::generate::GenerationBatch;
use crate::prompt::Mode;

pub const KB_FORMAT: &str = "sqg-kb";
pub const KB_VERSION: &str = "1";

/// Canonical form used for duplicate detection.
///
/// Trims surrounding whitespace, folds full-width ASCII forms and common CJK
/// punctuation onto their half-width counterparts, and lowercases Latin
/// letters. CJK ideographs pass through unchanged.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.trim().chars().map(fold_width) {
        if c.is_ascii_alphabetic() || ('\u{00C0}'..='\u{024F}').contains(&c) {
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out.trim().to_string()
}

fn fold_width(c: char) -> char {
    match c {
        '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
        '\u{3000}' => ' ',
        '。' => '.',
        '、' => ',',
        '“' | '”' => '"',
        '‘' | '’' => '\'',
        _ => c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Candidate,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuestion {
    pub text: String,
    pub mode: Mode,
    pub status: Status,
    #[serde(default)]
    pub batch_index: usize,
    #[serde(default)]
    pub position: usize,
    /// Owning pair; implied by the enclosing record on disk.
    #[serde(skip)]
    pub pair_id: String,
}

impl GeneratedQuestion {
    pub fn candidate(text: impl Into<String>, mode: Mode) -> Self {
        Self {
            text: text.into(),
            mode,
            status: Status::Candidate,
            batch_index: 0,
            position: 0,
            pair_id: String::new(),
        }
    }

    /// Moves a candidate to accepted/rejected. Any other transition fails.
    pub fn set_status(&mut self, status: Status) -> Result<(), KbError> {
        match (self.status, status) {
            (Status::Candidate, Status::Accepted | Status::Rejected) => {
                self.status = status;
                Ok(())
            }
            (from, to) => Err(KbError::InvalidTransition {
                text: self.text.clone(),
                from,
                to,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub pair_id: String,
    pub answer: String,
    pub questions: Vec<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub generated: Vec<GeneratedQuestion>,
}

impl QAPair {
    /// Builds a pair, dropping questions that normalize to an earlier one.
    pub fn new<I, S>(pair_id: impl Into<String>, answer: impl Into<String>, questions: I) -> Result<Self, KbError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let (pair, _) = Self::with_dropped(pair_id.into(), answer.into(), questions, Vec::new())?;
        Ok(pair)
    }

    fn with_dropped<I, S>(
        pair_id: String,
        answer: String,
        questions: I,
        tags: Vec<String>,
    ) -> Result<(Self, Vec<String>), KbError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if answer.trim().is_empty() {
            return Err(KbError::EmptyAnswer(pair_id));
        }
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for q in questions {
            let q: String = q.into();
            let key = normalize(&q);
            if key.is_empty() {
                dropped.push(q);
            } else if seen.insert(key) {
                kept.push(q);
            } else {
                dropped.push(q);
            }
        }
        if kept.is_empty() {
            return Err(KbError::NoQuestions(pair_id));
        }
        Ok((
            QAPair {
                pair_id,
                answer,
                questions: kept,
                tags,
                generated: Vec::new(),
            },
            dropped,
        ))
    }

    pub fn source_question(&self) -> &str {
        &self.questions[0]
    }

    pub fn accepted(&self) -> impl Iterator<Item = &GeneratedQuestion> {
        self.generated.iter().filter(|g| g.status == Status::Accepted)
    }

    pub fn candidates(&self) -> impl Iterator<Item = &GeneratedQuestion> {
        self.generated.iter().filter(|g| g.status == Status::Candidate)
    }

    /// Checks the pair invariants.
    pub fn validate(&self) -> Result<(), KbError> {
        if self.answer.trim().is_empty() {
            return Err(KbError::EmptyAnswer(self.pair_id.clone()));
        }
        if self.questions.is_empty() {
            return Err(KbError::NoQuestions(self.pair_id.clone()));
        }
        let mut seen = HashSet::new();
        for q in &self.questions {
            if !seen.insert(normalize(q)) {
                return Err(KbError::DuplicateQuestion {
                    pair_id: self.pair_id.clone(),
                    question: q.clone(),
                });
            }
        }
        for g in &self.generated {
            if g.text.trim().is_empty() {
                return Err(KbError::EmptyGenerated(self.pair_id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbMetadata {
    pub name: String,
    pub created_at: DateTime<Utc>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub metadata: KbMetadata,
    pub pairs: Vec<QAPair>,
}

impl KnowledgeBase {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            metadata: KbMetadata {
                name: name.into(),
                created_at: Utc::now(),
                version: KB_VERSION.to_string(),
            },
            pairs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, pair_id: &str) -> Option<&QAPair> {
        self.pairs.iter().find(|p| p.pair_id == pair_id)
    }

    pub fn pair_mut(&mut self, pair_id: &str) -> Option<&mut QAPair> {
        self.pairs.iter_mut().find(|p| p.pair_id == pair_id)
    }

    pub fn validate(&self) -> Result<(), KbError> {
        let mut ids = HashSet::new();
        for pair in &self.pairs {
            if !ids.insert(pair.pair_id.as_str()) {
                return Err(KbError::DuplicatePairId(pair.pair_id.clone()));
            }
            pair.validate()?;
        }
        Ok(())
    }

    /// Returns a copy with `batch` appended to `pair_id` as candidates.
    ///
    /// Items matching (after normalization) a source question, an earlier
    /// generated question of the pair, or an earlier item of the batch are
    /// skipped.
    pub fn attach_generated(&self, pair_id: &str, batch: &GenerationBatch) -> Result<KnowledgeBase, KbError> {
        let mut next = self.clone();
        let pair = next
            .pair_mut(pair_id)
            .ok_or_else(|| KbError::UnknownPair(pair_id.to_string()))?;
        let mut seen: HashSet<String> = pair
            .questions
            .iter()
            .map(|q| normalize(q))
            .chain(pair.generated.iter().map(|g| normalize(&g.text)))
            .collect();
        let batch_index = pair.generated.iter().map(|g| g.batch_index + 1).max().unwrap_or(0);
        let mut position = 0;
        for text in &batch.questions {
            let key = normalize(text);
            if key.is_empty() || !seen.insert(key) {
                continue;
            }
            pair.generated.push(GeneratedQuestion {
                text: text.clone(),
                mode: batch.mode,
                status: Status::Candidate,
                batch_index,
                position,
                pair_id: pair.pair_id.clone(),
            });
            position += 1;
        }
        Ok(next)
    }

    /// Sets the status of the generated question whose text matches `text`.
    pub fn mark_generated(&mut self, pair_id: &str, text: &str, status: Status) -> Result<(), KbError> {
        let pair = self
            .pair_mut(pair_id)
            .ok_or_else(|| KbError::UnknownPair(pair_id.to_string()))?;
        let key = normalize(text);
        let item = pair
            .generated
            .iter_mut()
            .find(|g| normalize(&g.text) == key)
            .ok_or_else(|| KbError::UnknownGenerated {
                pair_id: pair_id.to_string(),
                text: text.to_string(),
            })?;
        item.set_status(status)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("pair {0}: answer is empty")]
    EmptyAnswer(String),
    #[error("pair {0}: no questions")]
    NoQuestions(String),
    #[error("pair {pair_id}: duplicate question `{question}`")]
    DuplicateQuestion { pair_id: String, question: String },
    #[error("pair {0}: generated question is empty")]
    EmptyGenerated(String),
    #[error("duplicate pair_id `{0}`")]
    DuplicatePairId(String),
    #[error("unknown pair_id `{0}`")]
    UnknownPair(String),
    #[error("pair {pair_id}: no generated question `{text}`")]
    UnknownGenerated { pair_id: String, text: String },
    #[error("cannot move `{text}` from {from:?} to {to:?}")]
    InvalidTransition { text: String, from: Status, to: Status },
    #[error("{path}: no such file")]
    MissingFile { path: String },
    #[error("{} invalid record(s):\n{}", .errors.len(), format_record_errors(.errors))]
    Records { errors: Vec<RecordError> },
    #[error("parse error at byte {offset} (line {line}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        message: String,
    },
    #[error("file format {found} version {found_version}, expected {KB_FORMAT} version {KB_VERSION}")]
    VersionMismatch { found: String, found_version: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_record_errors(errors: &[RecordError]) -> String {
    errors
        .iter()
        .map(|e| format!("  line {}: {}", e.line, e.message))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One rejected input record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(InputFormat::Jsonl),
            "csv" => Ok(InputFormat::Csv),
            other => Err(format!("unknown input format `{other}` (expected jsonl or csv)")),
        }
    }
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Some(InputFormat::Jsonl),
            "csv" => Some(InputFormat::Csv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub kb: KnowledgeBase,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct InputRecord {
    #[serde(default)]
    pair_id: Option<String>,
    #[serde(default)]
    answer: String,
    #[serde(default)]
    questions: Vec<String>,
    #[serde(default)]
    tags: Vec<String>,
}

/// Reads raw QA pairs.
///
/// JSONL: one `{"pair_id"?, "answer", "questions": [..], "tags"?}` per line.
/// CSV: header with `answer` and `question` columns plus optional `pair_id`
/// and `tags` (`;`-separated); one row per question, rows sharing a
/// `pair_id` are merged in order of first appearance. Records without a
/// `pair_id` get `p<line>`.
pub fn ingest_qa_pairs(path: &Path, format: InputFormat, name: &str) -> Result<Ingested, KbError> {
    if !path.exists() {
        return Err(KbError::MissingFile {
            path: path.display().to_string(),
        });
    }
    let (records, mut errors) = match format {
        InputFormat::Jsonl => read_jsonl_records(path)?,
        InputFormat::Csv => read_csv_records(path)?,
    };

    let mut kb = KnowledgeBase::new(name);
    let mut warnings = Vec::new();
    let mut ids = HashSet::new();
    for (line, record) in records {
        let pair_id = record.pair_id.unwrap_or_else(|| format!("p{line}"));
        if !ids.insert(pair_id.clone()) {
            errors.push(RecordError {
                line,
                message: format!("duplicate pair_id `{pair_id}`"),
            });
            continue;
        }
        match QAPair::with_dropped(pair_id.clone(), record.answer, record.questions, record.tags) {
            Ok((pair, dropped)) => {
                for q in dropped {
                    let msg = format!("line {line}: pair {pair_id}: dropped duplicate question `{q}`");
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
                kb.pairs.push(pair);
            }
            Err(e) => errors.push(RecordError {
                line,
                message: e.to_string(),
            }),
        }
    }
    if !errors.is_empty() {
        errors.sort_by_key(|e| e.line);
        return Err(KbError::Records { errors });
    }
    Ok(Ingested { kb, warnings })
}

type Records = (Vec<(usize, InputRecord)>, Vec<RecordError>);

fn read_jsonl_records(path: &Path) -> Result<Records, KbError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_start_matches('\u{feff}');
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<InputRecord>(line) {
            Ok(r) => records.push((line_no, r)),
            Err(e) => errors.push(RecordError {
                line: line_no,
                message: format!("malformed record: {e}"),
            }),
        }
    }
    Ok((records, errors))
}

fn read_csv_records(path: &Path) -> Result<Records, KbError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(csv_io)?;
    let headers = reader.headers().map_err(csv_io)?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(answer_col), Some(question_col)) = (col("answer"), col("question")) else {
        return Ok((
            Vec::new(),
            vec![RecordError {
                line: 1,
                message: "CSV header must contain `answer` and `question` columns".into(),
            }],
        ));
    };
    let id_col = col("pair_id");
    let tags_col = col("tags");

    let mut records: Vec<(usize, InputRecord)> = Vec::new();
    let mut errors = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                errors.push(RecordError {
                    line,
                    message: format!("malformed row: {e}"),
                });
                continue;
            }
        };
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let pair_id = id_col
            .and_then(|c| row.get(c))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        let answer = row.get(answer_col).unwrap_or_default().to_string();
        let question = row.get(question_col).unwrap_or_default().to_string();
        let tags: Vec<String> = tags_col
            .and_then(|c| row.get(c))
            .map(|t| {
                t.split(';')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default();

        let existing = pair_id
            .as_ref()
            .and_then(|id| records.iter_mut().find(|(_, r)| r.pair_id.as_ref() == Some(id)));
        match existing {
            Some((first_line, record)) => {
                if !answer.trim().is_empty() && answer != record.answer {
                    errors.push(RecordError {
                        line,
                        message: format!(
                            "pair {} has a different answer than on line {first_line}",
                            record.pair_id.as_deref().unwrap_or_default()
                        ),
                    });
                    continue;
                }
                if !question.trim().is_empty() {
                    record.questions.push(question);
                }
                for t in tags {
                    if !record.tags.contains(&t) {
                        record.tags.push(t);
                    }
                }
            }
            None => records.push((
                line,
                InputRecord {
                    pair_id,
                    answer,
                    questions: if question.trim().is_empty() {
                        vec![]
                    } else {
                        vec![question]
                    },
                    tags,
                },
            )),
        }
    }
    Ok((records, errors))
}

fn csv_io(e: csv::Error) -> KbError {
    KbError::Io(std::io::Error::other(e))
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: String,
    name: String,
    created_at: DateTime<Utc>,
    pairs: usize,
}

/// Writes a header line followed by one pair per line.
pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<(), KbError> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        format: KB_FORMAT.to_string(),
        version: kb.metadata.version.clone(),
        name: kb.metadata.name.clone(),
        created_at: kb.metadata.created_at,
        pairs: kb.pairs.len(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for pair in &kb.pairs {
        serde_json::to_writer(&mut out, pair).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase, KbError> {
    if !path.exists() {
        return Err(KbError::MissingFile {
            path: path.display().to_string(),
        });
    }
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let text = String::from_utf8(bytes).map_err(|e| KbError::Parse {
        offset: e.utf8_error().valid_up_to(),
        line: 0,
        message: "invalid UTF-8".into(),
    })?;

    let mut offset = 0;
    let mut header: Option<Header> = None;
    let mut pairs = Vec::new();
    for (idx, raw) in text.split_inclusive('\n').enumerate() {
        let line_start = offset;
        offset += raw.len();
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| KbError::Parse {
            offset: line_start + e.column().saturating_sub(1),
            line: idx + 1,
            message: e.to_string(),
        };
        match &header {
            None => {
                let h: Header = serde_json::from_str(line).map_err(parse_err)?;
                if h.format != KB_FORMAT || h.version != KB_VERSION {
                    return Err(KbError::VersionMismatch {
                        found: h.format,
                        found_version: h.version,
                    });
                }
                header = Some(h);
            }
            Some(_) => {
                let mut pair: QAPair = serde_json::from_str(line).map_err(parse_err)?;
                for g in &mut pair.generated {
                    g.pair_id = pair.pair_id.clone();
                }
                pairs.push(pair);
            }
        }
    }
    let header = header.ok_or(KbError::Parse {
        offset: 0,
        line: 1,
        message: "missing header line".into(),
    })?;
    if header.pairs != pairs.len() {
        return Err(KbError::Parse {
            offset: text.len(),
            line: text.lines().count(),
            message: format!("header declares {} pairs, found {}", header.pairs, pairs.len()),
        });
    }
    let kb = KnowledgeBase {
        metadata: KbMetadata {
            name: header.name,
            created_at: header.created_at,
            version: header.version,
        },
        pairs,
    };
    kb.validate()?;
    Ok(kb)
}

/// Pair ids present in `kb`, for membership checks.
pub fn pair_ids(kb: &KnowledgeBase) -> BTreeSet<&str> {
    kb.pairs.iter().map(|p| p.pair_id.as_str()).collect()
}
