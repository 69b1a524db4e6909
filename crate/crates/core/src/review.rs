//! Expert review of generated questions.
//!
//! A session walks one reviewer through every candidate of a generation run
//! in a seed-determined order. Marks are appended to a JSONL log and synced
//! before they are acknowledged; reopening a store replays the session and
//! mark logs to rebuild identical state.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kb::{self, KbError, KnowledgeBase, Status};
use crate::metrics;

pub const SESSIONS_LOG: &str = "sessions.jsonl";
pub const MARKS_LOG: &str = "marks.jsonl";
/// File inside a run directory holding the knowledge base with candidates.
pub const RUN_KB_FILE: &str = "kb_expanded.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

impl From<Verdict> for Status {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Accept => Status::Accepted,
            Verdict::Reject => Status::Rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewMark {
    pub item_id: String,
    pub verdict: Verdict,
    pub note: Option<String>,
    pub ts: DateTime<Utc>,
}

impl ReviewMark {
    pub fn new(item_id: impl Into<String>, verdict: Verdict, note: Option<String>) -> Self {
        Self {
            item_id: item_id.into(),
            verdict,
            note,
            ts: Utc::now(),
        }
    }
}

/// One line of the mark log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkEvent {
    pub session_id: String,
    #[serde(flatten)]
    pub mark: ReviewMark,
}

/// A generated question offered for review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub pair_id: String,
    pub source_question: String,
    pub answer: String,
    pub candidate: String,
}

/// Item id for the `index`-th generated question of a pair.
pub fn item_id(pair_id: &str, index: usize) -> String {
    format!("{pair_id}#{index}")
}

fn split_item_id(id: &str) -> Option<(&str, usize)> {
    let (pair, idx) = id.rsplit_once('#')?;
    Some((pair, idx.parse().ok()?))
}

/// Every candidate of `kb`, in pair order then generation order.
pub fn candidate_items(kb: &KnowledgeBase) -> Vec<ReviewItem> {
    kb.pairs
        .iter()
        .flat_map(|pair| {
            pair.generated
                .iter()
                .enumerate()
                .filter(|(_, g)| g.status == Status::Candidate)
                .map(move |(i, g)| ReviewItem {
                    item_id: item_id(&pair.pair_id, i),
                    pair_id: pair.pair_id.clone(),
                    source_question: pair.source_question().to_string(),
                    answer: pair.answer.clone(),
                    candidate: g.text.clone(),
                })
        })
        .collect()
}

/// Applies logged verdicts to the generated questions they refer to.
pub fn apply_marks(kb: &KnowledgeBase, events: &[MarkEvent]) -> Result<KnowledgeBase, ReviewError> {
    let mut out = kb.clone();
    for e in events {
        let (pair_id, idx) =
            split_item_id(&e.mark.item_id).ok_or_else(|| ReviewError::UnknownItem(e.mark.item_id.clone()))?;
        let g = out
            .pair_mut(pair_id)
            .and_then(|p| p.generated.get_mut(idx))
            .ok_or_else(|| ReviewError::UnknownItem(e.mark.item_id.clone()))?;
        g.set_status(e.mark.verdict.into())?;
    }
    Ok(out)
}

pub fn read_mark_log(path: &Path) -> Result<Vec<MarkEvent>, ReviewError> {
    read_jsonl(path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ReviewError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ReviewError::Log {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{0}` has no candidate questions")]
    EmptyRun(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("item `{0}` is already marked")]
    AlreadyMarked(String),
    #[error("{path}: line {line}: {message}")]
    Log { path: String, line: usize, message: String },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Source of reviewable items per generation run.
pub trait RunCatalog: Send + Sync {
    fn items(&self, run_id: &str) -> Result<Vec<ReviewItem>, ReviewError>;
}

/// Reads `<runs_dir>/<run_id>/kb_expanded.jsonl`.
#[derive(Debug, Clone)]
pub struct DirCatalog {
    runs_dir: PathBuf,
}

impl DirCatalog {
    pub fn new(runs_dir: impl Into<PathBuf>) -> Self {
        Self {
            runs_dir: runs_dir.into(),
        }
    }
}

impl RunCatalog for DirCatalog {
    fn items(&self, run_id: &str) -> Result<Vec<ReviewItem>, ReviewError> {
        let safe = !run_id.is_empty() && run_id != "." && run_id != ".." && !run_id.contains(['/', '\\']);
        let path = self.runs_dir.join(run_id).join(RUN_KB_FILE);
        if !safe || !path.exists() {
            return Err(ReviewError::UnknownRun(run_id.to_string()));
        }
        Ok(candidate_items(&kb::load_kb(&path)?))
    }
}

/// In-memory catalog, mainly for tests and embedding.
#[derive(Debug, Clone, Default)]
pub struct MemoryCatalog {
    runs: HashMap<String, Vec<ReviewItem>>,
}

impl MemoryCatalog {
    pub fn insert(&mut self, run_id: impl Into<String>, items: Vec<ReviewItem>) {
        self.runs.insert(run_id.into(), items);
    }
}

impl RunCatalog for MemoryCatalog {
    fn items(&self, run_id: &str) -> Result<Vec<ReviewItem>, ReviewError> {
        self.runs
            .get(run_id)
            .cloned()
            .ok_or_else(|| ReviewError::UnknownRun(run_id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SessionEvent {
    session_id: String,
    run_id: String,
    reviewer_id: String,
    seed: u64,
    queue: Vec<String>,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewSession {
    pub session_id: String,
    pub run_id: String,
    pub reviewer_id: String,
    pub seed: u64,
    pub created_at: DateTime<Utc>,
    pub queue: Vec<ReviewItem>,
    pub marks: Vec<ReviewMark>,
    marked: HashSet<String>,
}

impl ReviewSession {
    fn position(&self, item_id: &str) -> Option<usize> {
        self.queue.iter().position(|i| i.item_id == item_id)
    }

    pub fn stats(&self) -> SessionStats {
        let accepted = self.marks.iter().filter(|m| m.verdict == Verdict::Accept).count();
        SessionStats {
            session_id: self.session_id.clone(),
            total: self.queue.len(),
            marked: self.marks.len(),
            accepted,
            rejected: self.marks.len() - accepted,
            remaining: self.queue.len() - self.marks.len(),
            acceptance_ratio: metrics::acceptance_ratio(&self.marks).ok(),
        }
    }

    pub fn next_item(&self) -> Option<ItemView> {
        self.queue
            .iter()
            .enumerate()
            .find(|(_, item)| !self.marked.contains(&item.item_id))
            .map(|(i, item)| ItemView {
                item: item.clone(),
                position: i + 1,
                total: self.queue.len(),
            })
    }

    fn apply(&mut self, mark: ReviewMark) -> Result<(), ReviewError> {
        if self.position(&mark.item_id).is_none() {
            return Err(ReviewError::UnknownItem(mark.item_id));
        }
        if !self.marked.insert(mark.item_id.clone()) {
            return Err(ReviewError::AlreadyMarked(mark.item_id));
        }
        self.marks.push(mark);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub session_id: String,
    pub total: usize,
    pub marked: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub remaining: usize,
    pub acceptance_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    #[serde(flatten)]
    pub item: ReviewItem,
    /// 1-based queue position.
    pub position: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub run_id: String,
    pub reviewer_id: String,
    pub seed: u64,
    pub total: usize,
    pub created_at: DateTime<Utc>,
}

impl From<&ReviewSession> for SessionSummary {
    fn from(s: &ReviewSession) -> Self {
        Self {
            session_id: s.session_id.clone(),
            run_id: s.run_id.clone(),
            reviewer_id: s.reviewer_id.clone(),
            seed: s.seed,
            total: s.queue.len(),
            created_at: s.created_at,
        }
    }
}

struct Logs {
    sessions: File,
    marks: File,
}

/// Session state plus its durable logs.
///
/// Reads share a lock; writes are serialized and reach disk before the
/// call returns.
pub struct ReviewStore {
    catalog: Box<dyn RunCatalog>,
    sessions: RwLock<HashMap<String, ReviewSession>>,
    logs: Option<Mutex<Logs>>,
}

impl std::fmt::Debug for ReviewStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReviewStore")
            .field("sessions", &self.sessions.read().map(|s| s.len()).unwrap_or(0))
            .field("durable", &self.logs.is_some())
            .finish()
    }
}

impl ReviewStore {
    /// A store without persistence.
    pub fn in_memory(catalog: impl RunCatalog + 'static) -> Self {
        Self {
            catalog: Box::new(catalog),
            sessions: RwLock::new(HashMap::new()),
            logs: None,
        }
    }

    /// Opens (or creates) the logs under `data_dir` and replays them.
    pub fn open(catalog: impl RunCatalog + 'static, data_dir: &Path) -> Result<Self, ReviewError> {
        std::fs::create_dir_all(data_dir)?;
        let sessions_path = data_dir.join(SESSIONS_LOG);
        let marks_path = data_dir.join(MARKS_LOG);

        let mut sessions = HashMap::new();
        let mut run_items: HashMap<String, HashMap<String, ReviewItem>> = HashMap::new();
        for event in read_jsonl::<SessionEvent>(&sessions_path)? {
            if !run_items.contains_key(&event.run_id) {
                let items = catalog.items(&event.run_id)?;
                run_items.insert(
                    event.run_id.clone(),
                    items.into_iter().map(|i| (i.item_id.clone(), i)).collect(),
                );
            }
            let by_id = &run_items[&event.run_id];
            let queue = event
                .queue
                .iter()
                .map(|id| {
                    by_id
                        .get(id)
                        .cloned()
                        .ok_or_else(|| ReviewError::UnknownItem(id.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            sessions.insert(
                event.session_id.clone(),
                ReviewSession {
                    session_id: event.session_id,
                    run_id: event.run_id,
                    reviewer_id: event.reviewer_id,
                    seed: event.seed,
                    created_at: event.created_at,
                    queue,
                    marks: Vec::new(),
                    marked: HashSet::new(),
                },
            );
        }
        for event in read_mark_log(&marks_path)? {
            let session = sessions
                .get_mut(&event.session_id)
                .ok_or_else(|| ReviewError::UnknownSession(event.session_id.clone()))?;
            session.apply(event.mark)?;
        }

        let append = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
        Ok(Self {
            catalog: Box::new(catalog),
            sessions: RwLock::new(sessions),
            logs: Some(Mutex::new(Logs {
                sessions: append(&sessions_path)?,
                marks: append(&marks_path)?,
            })),
        })
    }

    pub fn create_session(&self, run_id: &str, reviewer_id: &str, seed: u64) -> Result<SessionSummary, ReviewError> {
        let mut queue = self.catalog.items(run_id)?;
        if queue.is_empty() {
            return Err(ReviewError::EmptyRun(run_id.to_string()));
        }
        queue.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let session = ReviewSession {
            session_id: format!("{:016x}", rand::random::<u64>()),
            run_id: run_id.to_string(),
            reviewer_id: reviewer_id.to_string(),
            seed,
            created_at: Utc::now(),
            queue,
            marks: Vec::new(),
            marked: HashSet::new(),
        };
        if let Some(logs) = &self.logs {
            let event = SessionEvent {
                session_id: session.session_id.clone(),
                run_id: session.run_id.clone(),
                reviewer_id: session.reviewer_id.clone(),
                seed,
                queue: session.queue.iter().map(|i| i.item_id.clone()).collect(),
                created_at: session.created_at,
            };
            let mut logs = logs.lock().expect("log lock poisoned");
            append_line(&mut logs.sessions, &event)?;
        }
        let summary = SessionSummary::from(&session);
        self.sessions
            .write()
            .expect("session lock poisoned")
            .insert(session.session_id.clone(), session);
        Ok(summary)
    }

    pub fn session(&self, session_id: &str) -> Result<ReviewSession, ReviewError> {
        self.with_session(session_id, Clone::clone)
    }

    pub fn next_item(&self, session_id: &str) -> Result<Option<ItemView>, ReviewError> {
        self.with_session(session_id, ReviewSession::next_item)
    }

    pub fn session_stats(&self, session_id: &str) -> Result<SessionStats, ReviewError> {
        self.with_session(session_id, ReviewSession::stats)
    }

    pub fn sessions(&self) -> Vec<SessionSummary> {
        let mut out: Vec<SessionSummary> = self
            .sessions
            .read()
            .expect("session lock poisoned")
            .values()
            .map(SessionSummary::from)
            .collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.session_id.cmp(&b.session_id)));
        out
    }

    /// Records a verdict. The mark is on disk before this returns.
    pub fn submit_mark(
        &self,
        session_id: &str,
        item_id: &str,
        verdict: Verdict,
        note: Option<String>,
    ) -> Result<SessionStats, ReviewError> {
        // Holding the log mutex across validate → append → apply serializes
        // writers per store.
        let mut logs = self.logs.as_ref().map(|l| l.lock().expect("log lock poisoned"));
        let mut sessions = self.sessions.write().expect("session lock poisoned");
        let session = sessions
            .get_mut(session_id)
            .ok_or_else(|| ReviewError::UnknownSession(session_id.to_string()))?;
        if session.position(item_id).is_none() {
            return Err(ReviewError::UnknownItem(item_id.to_string()));
        }
        if session.marked.contains(item_id) {
            return Err(ReviewError::AlreadyMarked(item_id.to_string()));
        }
        let mark = ReviewMark::new(item_id, verdict, note);
        if let Some(logs) = logs.as_mut() {
            append_line(
                &mut logs.marks,
                &MarkEvent {
                    session_id: session_id.to_string(),
                    mark: mark.clone(),
                },
            )?;
        }
        session.apply(mark)?;
        Ok(session.stats())
    }

    fn with_session<T>(&self, session_id: &str, f: impl FnOnce(&ReviewSession) -> T) -> Result<T, ReviewError> {
        self.sessions
            .read()
            .expect("session lock poisoned")
            .get(session_id)
            .map(f)
            .ok_or_else(|| ReviewError::UnknownSession(session_id.to_string()))
    }
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> Result<(), ReviewError> {
    let mut line = serde_json::to_vec(value).map_err(std::io::Error::from)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()?;
    Ok(())
}

/// Stats per session recomputed from a mark log alone (no queue sizes, so
/// `total` and `remaining` are left at the marked count and 0).
pub fn replay_stats(events: &[MarkEvent]) -> HashMap<String, SessionStats> {
    let mut grouped: HashMap<String, Vec<ReviewMark>> = HashMap::new();
    for e in events {
        grouped.entry(e.session_id.clone()).or_default().push(e.mark.clone());
    }
    grouped
        .into_iter()
        .map(|(id, marks)| {
            let accepted = marks.iter().filter(|m| m.verdict == Verdict::Accept).count();
            let stats = SessionStats {
                session_id: id.clone(),
                total: marks.len(),
                marked: marks.len(),
                accepted,
                rejected: marks.len() - accepted,
                remaining: 0,
                acceptance_ratio: metrics::acceptance_ratio(&marks).ok(),
            };
            (id, stats)
        })
        .collect()
}
