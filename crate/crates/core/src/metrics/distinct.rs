use std::collections::HashSet;

/// Characters counted by Distinct-N: everything except whitespace.
pub fn ngram_chars(text: &str) -> Vec<char> {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Unique over total character n-grams pooled across `questions`.
///
/// Each question contributes its own sliding windows; grams never span two
/// questions. Returns 0 when there are no n-grams at all.
pub fn distinct_n<S: AsRef<str>>(questions: &[S], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let chars: Vec<Vec<char>> = questions.iter().map(|q| ngram_chars(q.as_ref())).collect();
    let mut unique: HashSet<&[char]> = HashSet::new();
    let mut total = 0usize;
    for q in &chars {
        for gram in q.windows(n) {
            total += 1;
            unique.insert(gram);
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Mean of Distinct-1 and Distinct-2.
pub fn distinct_avg<S: AsRef<str>>(questions: &[S]) -> f64 {
    (distinct_n(questions, 1) + distinct_n(questions, 2)) / 2.0
}
