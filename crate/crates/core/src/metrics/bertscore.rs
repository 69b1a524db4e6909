use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Contextual token vectors for one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddingSet {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl TokenEmbeddingSet {
    pub fn new(tokens: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        if tokens.is_empty() || vectors.is_empty() {
            return Err(MetricsError::EmptyTokens);
        }
        if tokens.len() != vectors.len() {
            return Err(MetricsError::TokenVectorMismatch {
                tokens: tokens.len(),
                vectors: vectors.len(),
            });
        }
        let dim = vectors[0].len();
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(MetricsError::DimensionMismatch(dim, v.len()));
        }
        Ok(Self { tokens, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }
}

/// Greedy-matching precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// Cosine similarity; 0 if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (
        a.iter().map(|x| x * x).sum::<f64>().sqrt(),
        b.iter().map(|x| x * x).sum::<f64>().sqrt(),
    );
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn bertscore_components(
    candidate: &TokenEmbeddingSet,
    reference: &TokenEmbeddingSet,
) -> Result<BertScore, MetricsError> {
    if candidate.tokens.is_empty() || reference.tokens.is_empty() {
        return Err(MetricsError::EmptyTokens);
    }
    if candidate.dim() != reference.dim() {
        return Err(MetricsError::DimensionMismatch(candidate.dim(), reference.dim()));
    }
    let cand: Vec<Vec<f64>> = candidate.vectors.iter().map(|v| unit(v)).collect();
    let refs: Vec<Vec<f64>> = reference.vectors.iter().map(|v| unit(v)).collect();
    let sim: Vec<Vec<f64>> = cand
        .iter()
        .map(|c| {
            refs.iter()
                .map(|r| c.iter().zip(r).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
                .collect()
        })
        .collect();

    let precision = sim
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / cand.len() as f64;
    let recall = (0..refs.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / refs.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        // Mixed-sign P/R can push the harmonic mean outside [-1, 1].
        (2.0 * precision * recall / (precision + recall)).clamp(-1.0, 1.0)
    };
    Ok(BertScore { precision, recall, f1 })
}

/// Unrescaled, unweighted BERTScore F1 between two token sets.
pub fn bertscore(candidate: &TokenEmbeddingSet, reference: &TokenEmbeddingSet) -> Result<f64, MetricsError> {
    bertscore_components(candidate, reference).map(|s| s.f1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vs: &[&[f64]]) -> TokenEmbeddingSet {
        TokenEmbeddingSet::new(
            (0..vs.len()).map(|i| format!("t{i}")).collect(),
            vs.iter().map(|v| v.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_sets_score_one() {
        let a = set(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        assert!((bertscore(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_scores_zero() {
        assert_eq!(bertscore(&set(&[&[1.0, 0.0]]), &set(&[&[0.0, 1.0]])).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_hand_table() {
        let h = 0.5f64.sqrt();
        let s = bertscore_components(&set(&[&[1.0, 0.0], &[0.0, 1.0]]), &set(&[&[1.0, 0.0], &[h, h]])).unwrap();
        assert!((s.precision - 0.85355).abs() < 1e-5);
        assert!((s.recall - 0.85355).abs() < 1e-5);
        assert!((s.f1 - 0.85355).abs() < 1e-5);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            bertscore(&set(&[&[1.0, 0.0]]), &set(&[&[1.0, 0.0, 0.0]])),
            Err(MetricsError::DimensionMismatch(2, 3))
        ));
        assert!(matches!(
            TokenEmbeddingSet::new(vec![], vec![]),
            Err(MetricsError::EmptyTokens)
        ));
        assert!(matches!(
            TokenEmbeddingSet::new(vec!["a".into()], vec![vec![1.0], vec![2.0]]),
            Err(MetricsError::TokenVectorMismatch { .. })
        ));
    }

    #[test]
    fn symmetric() {
        let a = set(&[&[1.0, 0.2, 0.0], &[0.1, 1.0, 0.3]]);
        let b = set(&[&[0.3, 0.3, 1.0]]);
        assert!((bertscore(&a, &b).unwrap() - bertscore(&b, &a).unwrap()).abs() < 1e-15);
    }
}
