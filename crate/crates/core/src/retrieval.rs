//! Retrieval chatbot simulation: index the knowledge-base questions, match a
//! query to its nearest question by cosine and measure top-1 accuracy with
//! and without generated questions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::embed::{EmbedError, Embedder};
use crate::kb::{KnowledgeBase, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncludeGenerated {
    None,
    AcceptedOnly,
    All,
}

impl IncludeGenerated {
    pub const ALL: [IncludeGenerated; 3] = [Self::None, Self::AcceptedOnly, Self::All];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::AcceptedOnly => "accepted_only",
            Self::All => "all",
        }
    }

    fn includes(self, status: Status) -> bool {
        match self {
            Self::None => false,
            Self::AcceptedOnly => status == Status::Accepted,
            // Rejected questions were judged wrong by a reviewer; never index them.
            Self::All => status != Status::Rejected,
        }
    }
}

impl FromStr for IncludeGenerated {
    type Err = RetrievalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "none" | "base" => Ok(Self::None),
            "accepted_only" | "accepted" => Ok(Self::AcceptedOnly),
            "all" => Ok(Self::All),
            _ => Err(RetrievalError::UnknownCondition(s.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("knowledge base is empty")]
    EmptyKb,
    #[error("index is empty")]
    EmptyIndex,
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("no conditions requested")]
    NoConditions,
    #[error("unknown include-generated mode `{0}`")]
    UnknownCondition(String),
    #[error("query expects unknown pair `{0}`")]
    UnknownPair(String),
    #[error("zero-length embedding for `{0}`")]
    ZeroVector(String),
    #[error("embedding dimension {got} differs from index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedder returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub question: String,
    pub pair_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionIndex {
    pub entries: Vec<IndexEntry>,
    pub embedder_id: String,
    pub include: IncludeGenerated,
    pub built_at: DateTime<Utc>,
}

impl QuestionIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.vector.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pair_id: String,
    pub question: String,
    pub score: f64,
    pub entry: usize,
}

fn unit(text: &str, mut v: Vec<f64>) -> Result<Vec<f64>, RetrievalError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(RetrievalError::ZeroVector(text.to_string()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

fn embed_units(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
    let vectors = embedder.embed_sentences(texts)?;
    if vectors.len() != texts.len() {
        return Err(RetrievalError::CountMismatch {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    texts.iter().zip(vectors).map(|(t, v)| unit(t, v)).collect()
}

/// The questions an index built with `include` would hold, in pair order
/// then question order (base questions before generated ones).
pub fn indexed_questions(kb: &KnowledgeBase, include: IncludeGenerated) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for pair in &kb.pairs {
        for q in &pair.questions {
            out.push((q.clone(), pair.pair_id.clone()));
        }
        for g in pair.generated.iter().filter(|g| include.includes(g.status)) {
            out.push((g.text.clone(), pair.pair_id.clone()));
        }
    }
    out
}

pub fn build_index(
    kb: &KnowledgeBase,
    embedder: &dyn Embedder,
    include: IncludeGenerated,
) -> Result<QuestionIndex, RetrievalError> {
    if kb.is_empty() {
        return Err(RetrievalError::EmptyKb);
    }
    let items = indexed_questions(kb, include);
    let texts: Vec<String> = items.iter().map(|(q, _)| q.clone()).collect();
    let vectors = embed_units(embedder, &texts)?;
    let dim = vectors.first().map_or(0, Vec::len);
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(RetrievalError::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    Ok(QuestionIndex {
        entries: items
            .into_iter()
            .zip(vectors)
            .map(|((question, pair_id), vector)| IndexEntry {
                question,
                pair_id,
                vector,
            })
            .collect(),
        embedder_id: embedder.id().to_string(),
        include,
        built_at: Utc::now(),
    })
}

/// Best entry for an already normalized query vector. Ties keep the earliest
/// entry.
pub fn match_vector(index: &QuestionIndex, query: &[f64]) -> Result<Match, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if query.len() != index.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim(),
            got: query.len(),
        });
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, e) in index.entries.iter().enumerate() {
        let s: f64 = e.vector.iter().zip(query).map(|(a, b)| a * b).sum();
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    let e = &index.entries[best];
    Ok(Match {
        pair_id: e.pair_id.clone(),
        question: e.question.clone(),
        score: best_score,
        entry: best,
    })
}

pub fn match_query(index: &QuestionIndex, query: &str, embedder: &dyn Embedder) -> Result<Match, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let v = embed_units(embedder, &[query.to_string()])?.remove(0);
    match_vector(index, &v)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub query: String,
    pub expected_pair_id: String,
}

pub fn read_queries(path: &Path) -> Result<Vec<LabeledQuery>, RetrievalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub n_queries: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: IncludeGenerated,
    pub index_size: usize,
    pub top1_accuracy: f64,
    pub n_queries: usize,
    pub correct: usize,
    pub per_pair: BTreeMap<String, PairAccuracy>,
    pub matches: Vec<Match>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub embedder_id: String,
    pub conditions: Vec<ConditionResult>,
    /// Per-pair accuracy change of each later condition against the first one.
    pub deltas: BTreeMap<IncludeGenerated, BTreeMap<String, f64>>,
}

impl AccuracyTable {
    pub fn accuracy(&self, condition: IncludeGenerated) -> Option<f64> {
        self.conditions
            .iter()
            .find(|c| c.condition == condition)
            .map(|c| c.top1_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,top1_accuracy,n_queries\n");
        for c in &self.conditions {
            out.push_str(&format!(
                "{},{:.6},{}\n",
                c.condition.as_str(),
                c.top1_accuracy,
                c.n_queries
            ));
        }
        out
    }
}

pub fn run_experiment(
    kb: &KnowledgeBase,
    embedder: &dyn Embedder,
    queries: &[LabeledQuery],
    conditions: &[IncludeGenerated],
) -> Result<AccuracyTable, RetrievalError> {
    if queries.is_empty() {
        return Err(RetrievalError::NoQueries);
    }
    if conditions.is_empty() {
        return Err(RetrievalError::NoConditions);
    }
    if let Some(q) = queries.iter().find(|q| kb.pair(&q.expected_pair_id).is_none()) {
        return Err(RetrievalError::UnknownPair(q.expected_pair_id.clone()));
    }
    let texts: Vec<String> = queries.iter().map(|q| q.query.clone()).collect();
    let qvecs = embed_units(embedder, &texts)?;

    let mut results = Vec::with_capacity(conditions.len());
    for &condition in conditions {
        let index = build_index(kb, embedder, condition)?;
        let mut per_pair: BTreeMap<String, PairAccuracy> = BTreeMap::new();
        let mut matches = Vec::with_capacity(queries.len());
        let mut correct = 0;
        for (q, v) in queries.iter().zip(&qvecs) {
            let m = match_vector(&index, v)?;
            let hit = m.pair_id == q.expected_pair_id;
            correct += usize::from(hit);
            let p = per_pair.entry(q.expected_pair_id.clone()).or_insert(PairAccuracy {
                n_queries: 0,
                correct: 0,
                accuracy: 0.0,
            });
            p.n_queries += 1;
            p.correct += usize::from(hit);
            matches.push(m);
        }
        for p in per_pair.values_mut() {
            p.accuracy = p.correct as f64 / p.n_queries as f64;
        }
        results.push(ConditionResult {
            condition,
            index_size: index.len(),
            top1_accuracy: correct as f64 / queries.len() as f64,
            n_queries: queries.len(),
            correct,
            per_pair,
            matches,
        });
    }

    let base = &results[0];
    let deltas = results[1..]
        .iter()
        .map(|r| {
            let d = r
                .per_pair
                .iter()
                .map(|(id, acc)| (id.clone(), acc.accuracy - base.per_pair[id].accuracy))
                .collect();
            (r.condition, d)
        })
        .collect();
    Ok(AccuracyTable {
        embedder_id: embedder.id().to_string(),
        conditions: results,
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{HashEmbedder, LookupEmbedder};
    use crate::kb::QAPair;

    fn lq(q: &str, p: &str) -> LabeledQuery {
        LabeledQuery {
            query: q.into(),
            expected_pair_id: p.into(),
        }
    }

    #[test]
    fn counts_follow_include_mode() {
        let mut kb = KnowledgeBase::new("t");
        kb.pairs.push(QAPair::new("a", "A", ["q1", "q2"]).unwrap());
        kb.pairs.push(QAPair::new("b", "B", ["q3"]).unwrap());
        for (p, t) in [("a", "g1"), ("a", "g2"), ("b", "g3"), ("b", "g4")] {
            kb.pair_mut(p)
                .unwrap()
                .generated
                .push(crate::kb::GeneratedQuestion::candidate(t, crate::Mode::ContextAware));
        }
        for t in ["g1", "g2", "g3"] {
            let p = if t == "g3" { "b" } else { "a" };
            kb.mark_generated(p, t, Status::Accepted).unwrap();
        }
        let e = HashEmbedder::new(16);
        assert_eq!(build_index(&kb, &e, IncludeGenerated::None).unwrap().len(), 3);
        assert_eq!(build_index(&kb, &e, IncludeGenerated::AcceptedOnly).unwrap().len(), 6);
        assert_eq!(build_index(&kb, &e, IncludeGenerated::All).unwrap().len(), 7);
        assert!(matches!(
            build_index(&KnowledgeBase::new("e"), &e, IncludeGenerated::None),
            Err(RetrievalError::EmptyKb)
        ));
    }

    #[test]
    fn hand_assigned_vectors_and_ties() {
        let e = LookupEmbedder::new([
            ("e0", vec![1.0, 0.0]),
            ("e1", vec![0.0, 1.0]),
            ("e2", vec![0.6, 0.8]),
            ("q", vec![0.5, 0.9]),
            ("t", vec![1.0, 1.0]),
        ]);
        let mut kb = KnowledgeBase::new("t");
        kb.pairs.push(QAPair::new("p0", "A", ["e0"]).unwrap());
        kb.pairs.push(QAPair::new("p1", "B", ["e1"]).unwrap());
        kb.pairs.push(QAPair::new("p2", "C", ["e2"]).unwrap());
        let index = build_index(&kb, &e, IncludeGenerated::None).unwrap();
        // cos(q, e0) = .486, cos(q, e1) = .874, cos(q, e2) = .986
        let m = match_query(&index, "q", &e).unwrap();
        assert_eq!((m.entry, m.pair_id.as_str()), (2, "p2"));
        // (1,1) is equidistant from e0 and e1.
        let mut tie = index.clone();
        tie.entries.truncate(2);
        let m = match_query(&tie, "t", &e).unwrap();
        assert_eq!(m.entry, 0);
        let exact = match_query(&index, "e1", &e).unwrap();
        assert!((exact.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_queries_score_perfectly() {
        let mut kb = KnowledgeBase::new("t");
        kb.pairs
            .push(QAPair::new("a", "A", ["怎么开发票", "发票如何开具"]).unwrap());
        kb.pairs.push(QAPair::new("b", "B", ["退款多久到账"]).unwrap());
        let queries = vec![lq("怎么开发票", "a"), lq("发票如何开具", "a"), lq("退款多久到账", "b")];
        let t = run_experiment(&kb, &HashEmbedder::new(64), &queries, &IncludeGenerated::ALL).unwrap();
        for c in &t.conditions {
            assert_eq!(c.top1_accuracy, 1.0);
        }
        assert!(t
            .to_csv()
            .starts_with("condition,top1_accuracy,n_queries\nnone,1.000000,3\n"));
        assert!(matches!(
            run_experiment(&kb, &HashEmbedder::new(8), &[], &IncludeGenerated::ALL),
            Err(RetrievalError::NoQueries)
        ));
        assert!(matches!(
            run_experiment(&kb, &HashEmbedder::new(8), &[lq("x", "zz")], &IncludeGenerated::ALL),
            Err(RetrievalError::UnknownPair(_))
        ));
    }
}
