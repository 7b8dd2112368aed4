//! Answer-overlap metrics.

use std::collections::HashMap;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, drops ASCII punctuation and the articles a/an/the, and splits
/// on whitespace.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    stripped
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(str::to_string)
        .collect()
}

pub fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Bag-of-token F1, maximized over the gold answers.
pub fn token_f1<S: AsRef<str>>(prediction: &str, answers: &[S]) -> f64 {
    let pred = normalize_answer(prediction);
    answers
        .iter()
        .map(|a| f1_tokens(&pred, &normalize_answer(a.as_ref())))
        .fold(0.0, f64::max)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let lcs = lcs_len(pred, gold);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / pred.len() as f64;
    let r = lcs as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// LCS F-measure (beta = 1) on normalized tokens, maximized over the gold
/// answers.
pub fn rouge_l<S: AsRef<str>>(prediction: &str, answers: &[S]) -> f64 {
    let pred = normalize_answer(prediction);
    answers
        .iter()
        .map(|a| rouge_l_tokens(&pred, &normalize_answer(a.as_ref())))
        .fold(0.0, f64::max)
}
