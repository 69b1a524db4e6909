use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{
    bertscore, distinct_n, semantic_f1, semantic_precision, semantic_recall, MetricsError, ScoreMatrix,
    TokenEmbeddingSet,
};
use crate::embed::Embedder;
use crate::review::{ReviewMark, Verdict};

/// Accepted marks over all marks.
pub fn acceptance_ratio(marks: &[ReviewMark]) -> Result<f64, MetricsError> {
    if marks.is_empty() {
        return Err(MetricsError::NoMarks);
    }
    let mut seen = HashSet::new();
    for m in marks {
        if !seen.insert(m.item_id.as_str()) {
            return Err(MetricsError::DuplicateMark(m.item_id.clone()));
        }
    }
    let accepted = marks.iter().filter(|m| m.verdict == Verdict::Accept).count();
    Ok(accepted as f64 / marks.len() as f64)
}

/// Percentage with one decimal, rounding half up: `0.84` → `"84.0%"`.
pub fn format_percent(ratio: f64) -> String {
    // The epsilon absorbs binary representation error, e.g. 0.8405 * 1000.
    let tenths = (ratio * 1000.0 + 0.5 + 1e-9).floor();
    format!("{:.1}%", tenths / 10.0)
}

/// Generated and reference questions of one source pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInput {
    pub pair_id: String,
    pub generated: Vec<String>,
    pub references: Vec<String>,
}

impl PairInput {
    /// References are the pair's existing questions. The source question is
    /// left out when others exist, since generation was conditioned on it.
    pub fn from_pair(pair: &crate::kb::QAPair, generated: Vec<String>) -> Self {
        let references = if pair.questions.len() > 1 {
            pair.questions[1..].to_vec()
        } else {
            pair.questions.clone()
        };
        Self {
            pair_id: pair.pair_id.clone(),
            generated,
            references,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub generated_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
}

/// Metrics for one run at one generation count, macro-averaged over pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub generated_count: usize,
    pub pairs: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub distinct_avg: f64,
    pub acceptance_ratio: Option<f64>,
    #[serde(default)]
    pub per_pair: Vec<PairMetrics>,
}

/// Scores one pair from a prepared score matrix and its generated texts.
pub fn evaluate_pair<S: AsRef<str>>(pair_id: &str, scores: &ScoreMatrix, generated: &[S]) -> PairMetrics {
    PairMetrics {
        pair_id: pair_id.to_string(),
        generated_count: generated.len(),
        precision: semantic_precision(scores),
        recall: semantic_recall(scores),
        distinct_1: distinct_n(generated, 1),
        distinct_2: distinct_n(generated, 2),
    }
}

/// Macro-averages per-pair metrics. F1 is the harmonic mean of the averaged
/// precision and recall; Distinct-Avg is the mean of the averaged
/// Distinct-1 and Distinct-2.
pub fn aggregate(label: &str, generated_count: usize, per_pair: Vec<PairMetrics>) -> MetricsReport {
    let k = per_pair.len().max(1) as f64;
    let mean = |f: fn(&PairMetrics) -> f64| per_pair.iter().map(f).sum::<f64>() / k;
    let precision = mean(|m| m.precision);
    let recall = mean(|m| m.recall);
    let distinct_1 = mean(|m| m.distinct_1);
    let distinct_2 = mean(|m| m.distinct_2);
    MetricsReport {
        label: label.to_string(),
        generated_count,
        pairs: per_pair.len(),
        precision,
        recall,
        f1: semantic_f1(precision, recall),
        distinct_1,
        distinct_2,
        distinct_avg: (distinct_1 + distinct_2) / 2.0,
        acceptance_ratio: None,
        per_pair,
    }
}

/// Computes one report per entry of `counts`, each over the first `n`
/// generated questions of every pair.
///
/// Every distinct text is embedded once. Pairs with fewer than `n`
/// generated questions are evaluated on what they have, with a warning.
pub fn evaluate_run(
    label: &str,
    pairs: &[PairInput],
    embedder: &dyn Embedder,
    counts: &[usize],
) -> Result<Vec<MetricsReport>, MetricsError> {
    let max_n = counts.iter().copied().max().unwrap_or(0);
    for p in pairs {
        if p.references.is_empty() {
            return Err(MetricsError::NoReferences(p.pair_id.clone()));
        }
        if p.generated.len() < max_n {
            log::warn!(
                "pair {}: {} generated questions, fewer than n={}; truncating",
                p.pair_id,
                p.generated.len(),
                max_n
            );
        }
    }

    let mut cache: HashMap<String, TokenEmbeddingSet> = HashMap::new();
    for p in pairs {
        let mut missing: Vec<String> = Vec::new();
        for text in p.generated.iter().take(max_n).chain(&p.references) {
            if !cache.contains_key(text) && !missing.contains(text) {
                missing.push(text.clone());
            }
        }
        if missing.is_empty() {
            continue;
        }
        let sets = embedder
            .embed_tokens(&missing)
            .map_err(|source| MetricsError::Embedding {
                pair_id: p.pair_id.clone(),
                source,
            })?;
        cache.extend(missing.into_iter().zip(sets));
    }

    let mut reports = Vec::with_capacity(counts.len());
    for &n in counts {
        let mut per_pair = Vec::with_capacity(pairs.len());
        for p in pairs {
            let generated = &p.generated[..n.min(p.generated.len())];
            if generated.is_empty() {
                log::warn!("pair {}: no generated questions, skipped", p.pair_id);
                continue;
            }
            let scores = ScoreMatrix::build(generated.len(), p.references.len(), |i, j| {
                bertscore(&cache[generated[i].as_str()], &cache[p.references[j].as_str()])
            })?;
            per_pair.push(evaluate_pair(&p.pair_id, &scores, generated));
        }
        if per_pair.is_empty() {
            return Err(MetricsError::NothingToEvaluate(n));
        }
        reports.push(aggregate(label, n, per_pair));
    }
    Ok(reports)
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub report: MetricsReport,
}

const TABLE_HEADER: [&str; 8] = [
    "Models",
    "Precision",
    "Recall",
    "F1-Score",
    "Distinct-1",
    "Distinct-2",
    "Distinct-Avg",
    "Acceptance ratio",
];

/// Plain-text table with the comparison columns, values to four decimals
/// and the acceptance ratio as a percentage (`-` when not reviewed).
pub fn render_table(rows: &[TableRow]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let r = &row.report;
            vec![
                row.label.clone(),
                format!("{:.4}", r.precision),
                format!("{:.4}", r.recall),
                format!("{:.4}", r.f1),
                format!("{:.4}", r.distinct_1),
                format!("{:.4}", r.distinct_2),
                format!("{:.4}", r.distinct_avg),
                r.acceptance_ratio.map_or_else(|| "-".to_string(), format_percent),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..TABLE_HEADER.len())
        .map(|c| {
            cells
                .iter()
                .map(|r| r[c].chars().count())
                .chain(std::iter::once(TABLE_HEADER[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();

    let line = |values: Vec<&str>| -> String {
        values
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let pad = widths[c] - v.chars().count();
                if c == 0 {
                    format!("{v}{}", " ".repeat(pad))
                } else {
                    format!("{}{v}", " ".repeat(pad))
                }
            })
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = line(TABLE_HEADER.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub const CURVE_HEADER: [&str; 7] = [
    "n",
    "precision",
    "recall",
    "f1",
    "distinct_1",
    "distinct_2",
    "distinct_avg",
];

/// Writes one CSV row per report, in the given order.
pub fn write_curve_csv<W: Write>(reports: &[MetricsReport], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for r in reports {
        w.write_record([
            r.generated_count.to_string(),
            format!("{:.6}", r.precision),
            format!("{:.6}", r.recall),
            format!("{:.6}", r.f1),
            format!("{:.6}", r.distinct_1),
            format!("{:.6}", r.distinct_2),
            format!("{:.6}", r.distinct_avg),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back `(n, [precision, recall, f1, distinct_1, distinct_2, distinct_avg])` rows.
pub fn read_curve_csv<R: Read>(input: R) -> Result<Vec<(usize, [f64; 6])>, MetricsError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| -> Result<f64, MetricsError> {
            record
                .get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| MetricsError::Io(std::io::Error::other(format!("bad curve value in column {i}"))))
        };
        let n = parse(0)? as usize;
        rows.push((n, [parse(1)?, parse(2)?, parse(3)?, parse(4)?, parse(5)?, parse(6)?]));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{HashEmbedder, LookupEmbedder};

    fn mark(id: &str, verdict: Verdict) -> ReviewMark {
        ReviewMark::new(id, verdict, None)
    }

    fn marks(accepted: usize, rejected: usize) -> Vec<ReviewMark> {
        (0..accepted)
            .map(|i| mark(&format!("a{i}"), Verdict::Accept))
            .chain((0..rejected).map(|i| mark(&format!("r{i}"), Verdict::Reject)))
            .collect()
    }

    #[test]
    fn acceptance_ratio_cases() {
        assert_eq!(acceptance_ratio(&marks(84, 16)).unwrap(), 0.84);
        assert_eq!(format_percent(acceptance_ratio(&marks(84, 16)).unwrap()), "84.0%");
        assert_eq!(acceptance_ratio(&marks(0, 7)).unwrap(), 0.0);
        assert!(matches!(acceptance_ratio(&[]), Err(MetricsError::NoMarks)));
        let mut dup = marks(1, 1);
        dup.push(mark("a0", Verdict::Reject));
        assert!(matches!(acceptance_ratio(&dup), Err(MetricsError::DuplicateMark(_))));
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(format_percent(11.0 / 60.0), "18.3%");
        assert_eq!(format_percent(18.0 / 98.0), "18.4%");
        assert_eq!(format_percent(0.45), "45.0%");
        assert_eq!(format_percent(0.379), "37.9%");
        assert_eq!(format_percent(0.8405), "84.1%");
        assert_eq!(format_percent(0.0), "0.0%");
        assert_eq!(format_percent(1.0), "100.0%");
    }

    #[test]
    fn identity_corpus() {
        let refs: Vec<String> = ["证明要多久", "开证明几天", "多久能拿到证明"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let pairs = vec![PairInput {
            pair_id: "p".into(),
            generated: refs.clone(),
            references: refs,
        }];
        let reports = evaluate_run("id", &pairs, &HashEmbedder::new(32), &[2, 3]).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[1].generated_count, 3);
        assert!((reports[1].precision - 1.0).abs() < 1e-12);
        assert!((reports[1].recall - 1.0).abs() < 1e-12);
        assert!((reports[1].f1 - 1.0).abs() < 1e-12);
        // n=2 still matches its own rows perfectly
        assert!((reports[0].precision - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_pair_macro_average() {
        // Single-token sets make each BERTScore a plain cosine.
        let h = 0.6f64;
        let e = LookupEmbedder::new([
            ("g1", vec![1.0, 0.0]),
            ("r1", vec![1.0, 0.0]),
            ("r2", vec![h, (1.0 - h * h).sqrt()]),
            ("g2", vec![0.0, 1.0]),
            ("s1", vec![0.0, 1.0]),
        ]);
        let pairs = vec![
            PairInput {
                pair_id: "a".into(),
                generated: vec!["g1".into()],
                references: vec!["r1".into(), "r2".into()],
            },
            PairInput {
                pair_id: "b".into(),
                generated: vec!["g2".into()],
                references: vec!["s1".into()],
            },
        ];
        let r = &evaluate_run("m", &pairs, &e, &[1]).unwrap()[0];
        // pair a: P = 1, R = (1 + 0.6) / 2 = 0.8; pair b: P = R = 1
        assert!((r.precision - 1.0).abs() < 1e-12);
        assert!((r.recall - 0.9).abs() < 1e-12);
        assert!((r.f1 - 2.0 * 0.9 / 1.9).abs() < 1e-12);
        assert_eq!(r.pairs, 2);
    }

    #[test]
    fn report_invariants_hold() {
        let per_pair = vec![
            PairMetrics {
                pair_id: "a".into(),
                generated_count: 3,
                precision: 0.9,
                recall: 0.6,
                distinct_1: 0.5,
                distinct_2: 0.7,
            },
            PairMetrics {
                pair_id: "b".into(),
                generated_count: 3,
                precision: 0.7,
                recall: 0.8,
                distinct_1: 0.3,
                distinct_2: 0.9,
            },
        ];
        let r = aggregate("x", 3, per_pair);
        assert!((r.f1 - semantic_f1(r.precision, r.recall)).abs() < 1e-12);
        assert!((r.distinct_avg - (r.distinct_1 + r.distinct_2) / 2.0).abs() < 1e-12);
        assert!((r.precision - 0.8).abs() < 1e-12);
    }

    #[test]
    fn missing_references_error() {
        let pairs = vec![PairInput {
            pair_id: "p".into(),
            generated: vec!["a".into()],
            references: vec![],
        }];
        assert!(matches!(
            evaluate_run("x", &pairs, &HashEmbedder::new(4), &[1]),
            Err(MetricsError::NoReferences(_))
        ));
    }

    #[test]
    fn embedder_failure_names_pair() {
        let pairs = vec![PairInput {
            pair_id: "p7".into(),
            generated: vec!["a".into()],
            references: vec!["b".into()],
        }];
        let err = evaluate_run("x", &pairs, &LookupEmbedder::default(), &[1]).unwrap_err();
        assert!(err.to_string().starts_with("pair p7"));
    }

    #[test]
    fn table_and_curve_shapes() {
        let mut r = aggregate(
            "Intention-Enhanced",
            20,
            vec![PairMetrics {
                pair_id: "a".into(),
                generated_count: 20,
                precision: 0.8622,
                recall: 0.839,
                distinct_1: 0.2041,
                distinct_2: 0.3395,
            }],
        );
        r.acceptance_ratio = Some(0.84);
        let table = render_table(&[TableRow {
            label: r.label.clone(),
            report: r.clone(),
        }]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Models"));
        assert!(lines[2].contains("0.8622") && lines[2].ends_with("84.0%"));

        let mut buf = Vec::new();
        write_curve_csv(&[r.clone(), r], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "n,precision,recall,f1,distinct_1,distinct_2,distinct_avg"
        );
        let rows = read_curve_csv(&buf[..]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, 20);
    }
}
