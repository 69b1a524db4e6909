//! Evaluation metrics for generated questions.
//!
//! Semantic relevance compares generated questions against reference
//! questions through BERTScore: precision averages, over generated
//! questions, the best score against any reference; recall averages, over
//! references, the best score against any generated question. Character
//! diversity is Distinct-N over pooled character n-grams. Expert review
//! contributes the acceptance ratio.

mod bertscore;
mod distinct;
mod report;

pub use bertscore::{bertscore, bertscore_components, cosine, BertScore, TokenEmbeddingSet};
pub use distinct::{distinct_avg, distinct_n, ngram_chars};
pub use report::{
    acceptance_ratio, aggregate, evaluate_pair, evaluate_run, format_percent, read_curve_csv, render_table,
    write_curve_csv, MetricsReport, PairInput, PairMetrics, TableRow, CURVE_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("token embedding set is empty")]
    EmptyTokens,
    #[error("{tokens} tokens but {vectors} vectors")]
    TokenVectorMismatch { tokens: usize, vectors: usize },
    #[error("vector dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("score matrix must be at least 1x1")]
    EmptyMatrix,
    #[error("score matrix data has {len} entries, expected {rows}x{cols}")]
    MatrixShape { rows: usize, cols: usize, len: usize },
    #[error("no review marks")]
    NoMarks,
    #[error("item `{0}` is marked more than once")]
    DuplicateMark(String),
    #[error("pair {pair_id}: {source}")]
    Embedding {
        pair_id: String,
        #[source]
        source: crate::embed::EmbedError,
    },
    #[error("pair {0} has no reference questions")]
    NoReferences(String),
    #[error("no pair has generated questions for n={0}")]
    NothingToEvaluate(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Pairwise scores: rows are generated questions, columns references.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MetricsError> {
        if rows == 0 || cols == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        if data.len() != rows * cols {
            return Err(MetricsError::MatrixShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MetricsError::MatrixShape {
                rows: rows.len(),
                cols,
                len: rows.iter().map(Vec::len).sum(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Fills entry `(i, j)` with `score(i, j)`.
    pub fn build<E>(rows: usize, cols: usize, mut score: impl FnMut(usize, usize) -> Result<f64, E>) -> Result<Self, E>
    where
        E: From<MetricsError>,
    {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(score(i, j)?);
            }
        }
        Ok(Self::new(rows, cols, data)?)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Mean over generated questions of the best score against any reference.
pub fn semantic_precision(s: &ScoreMatrix) -> f64 {
    let total: f64 = (0..s.rows)
        .map(|i| (0..s.cols).map(|j| s.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / s.rows as f64
}

/// Mean over references of the best score against any generated question.
pub fn semantic_recall(s: &ScoreMatrix) -> f64 {
    let total: f64 = (0..s.cols)
        .map(|j| (0..s.rows).map(|i| s.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / s.cols as f64
}

/// Harmonic mean; 0 when `p + r == 0`.
pub fn semantic_f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}
