//! Splitting raw model text into individual questions.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::kb::normalize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no question could be parsed from model output {raw:?}")]
pub struct ParseError {
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedQuestions {
    pub questions: Vec<String>,
    pub expected: usize,
}

impl ParsedQuestions {
    /// True when the model returned a different number of items than asked.
    pub fn deviates(&self) -> bool {
        self.questions.len() != self.expected
    }
}

/// Splits `raw` on line boundaries and strips list markers.
///
/// Recognised markers: `1.` `1、` `1)` `1）` `1．` `1:` `(1)` `（1）`,
/// `- ` `* ` `•`, and circled numbers ①–⑳. Empty lines are dropped.
pub fn parse_multi_question(raw: &str, expected: usize) -> Result<ParsedQuestions, ParseError> {
    let questions: Vec<String> = raw
        .lines()
        .map(strip_marker)
        .filter(|q| !q.is_empty())
        .map(str::to_string)
        .collect();
    if questions.is_empty() {
        return Err(ParseError { raw: raw.to_string() });
    }
    let parsed = ParsedQuestions { questions, expected };
    if parsed.deviates() {
        log::debug!(
            "model returned {} questions, expected {}",
            parsed.questions.len(),
            expected
        );
    }
    Ok(parsed)
}

/// Parses a one-to-one response: the first non-empty line, marker stripped.
pub fn parse_single_question(raw: &str) -> Result<String, ParseError> {
    raw.lines()
        .map(strip_marker)
        .find(|q| !q.is_empty())
        .map(str::to_string)
        .ok_or_else(|| ParseError { raw: raw.to_string() })
}

pub fn strip_marker(line: &str) -> &str {
    let line = line.trim();
    let mut chars = line.char_indices().peekable();
    let Some(&(_, first)) = chars.peek() else {
        return line;
    };

    if ('\u{2460}'..='\u{2473}').contains(&first) {
        let rest = line[first.len_utf8()..].trim_start();
        return rest.strip_prefix(['.', '、', '．']).unwrap_or(rest).trim();
    }
    if first == '•' {
        return line[first.len_utf8()..].trim();
    }
    if let Some(rest) = line.strip_prefix("- ").or_else(|| line.strip_prefix("* ")) {
        return rest.trim();
    }

    // (1) / （1）
    for (open, close) in [('(', ')'), ('（', '）')] {
        if let Some(inner) = line.strip_prefix(open) {
            let digits = inner.chars().take_while(is_digit).map(char::len_utf8).sum::<usize>();
            if digits > 0 {
                if let Some(rest) = inner[digits..].strip_prefix(close) {
                    return rest.trim();
                }
            }
        }
    }

    let digits = line.chars().take_while(is_digit).map(char::len_utf8).sum::<usize>();
    if digits > 0 {
        let rest = &line[digits..];
        let mut after = rest.chars();
        if let Some(sep) = after.next() {
            if matches!(sep, '.' | '、' | ')' | '）' | '．' | ':' | '：') {
                let tail = &rest[sep.len_utf8()..];
                if !tail.starts_with(|c: char| c.is_ascii_digit()) {
                    return tail.trim();
                }
            }
        }
    }
    line
}

fn is_digit(c: &char) -> bool {
    c.is_ascii_digit() || ('０'..='９').contains(c)
}

/// Drops items equal to `source` or to an earlier item under [`normalize`],
/// keeping first occurrences in order.
pub fn dedup<S: AsRef<str>>(questions: &[S], source: Option<&str>) -> Vec<String> {
    let mut seen: HashSet<String> = source.map(normalize).into_iter().collect();
    questions
        .iter()
        .map(AsRef::as_ref)
        .filter(|q| {
            let key = normalize(q);
            !key.is_empty() && seen.insert(key)
        })
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn numbered() {
        let p = parse_multi_question("1. A\n2. B\n3. C", 3).unwrap();
        assert_eq!(p.questions, vec!["A", "B", "C"]);
        assert!(!p.deviates());
    }

    #[test]
    fn unnumbered_under_delivery() {
        let p = parse_multi_question("A\nB", 3).unwrap();
        assert_eq!(p.questions, vec!["A", "B"]);
        assert!(p.deviates());
    }

    #[test]
    fn blank_is_error() {
        let err = parse_multi_question("   \n\n", 5).unwrap_err();
        assert_eq!(err.raw, "   \n\n");
    }

    #[test]
    fn marker_variants() {
        let raw = "1、证明要多久\n2) 开证明多久\n③ 证明几天\n- 证明时间\n（5）证明开具\n６．证明\n• 要多久\n1.5倍怎么算\n2024年的证明";
        let p = parse_multi_question(raw, 9).unwrap();
        assert_eq!(
            p.questions,
            vec![
                "证明要多久",
                "开证明多久",
                "证明几天",
                "证明时间",
                "证明开具",
                "证明",
                "要多久",
                "1.5倍怎么算",
                "2024年的证明"
            ]
        );
    }

    #[test]
    fn windows_line_endings() {
        let p = parse_multi_question("1. A\r\n2. B\r\n", 2).unwrap();
        assert_eq!(p.questions, vec!["A", "B"]);
    }

    #[test]
    fn single_question_takes_first_line() {
        assert_eq!(parse_single_question("\n 1. 证明多久？\n2. x").unwrap(), "证明多久？");
        assert!(parse_single_question("  ").is_err());
    }

    #[test]
    fn dedup_cases() {
        assert_eq!(dedup(&["A", "a ", "B"], None), vec!["A", "B"]);
        assert_eq!(dedup(&["Q"], Some("Q")), Vec::<String>::new());
        assert_eq!(dedup::<&str>(&[], Some("x")), Vec::<String>::new());
        assert_eq!(dedup(&["要多久？", "要多久?"], None), vec!["要多久？"]);
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(items in proptest::collection::vec("[aAbB？?证明 ]{0,4}", 0..12), src in "[aAb证]{0,2}") {
            let once = dedup(&items, Some(&src));
            let twice = dedup(&once, Some(&src));
            prop_assert_eq!(&once, &twice);
            // order-preserving subsequence of the input
            let mut it = items.iter();
            for q in &once {
                prop_assert!(it.any(|x| x == q));
            }
        }

        #[test]
        fn parse_output_has_no_blank_items(raw in "[1-3.、\\- a-c\n]{1,30}") {
            if let Ok(p) = parse_multi_question(&raw, 3) {
                prop_assert!(p.questions.iter().all(|q| !q.trim().is_empty()));
            }
        }
    }
}
