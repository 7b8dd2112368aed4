//! Browser bindings. Each export takes plain strings and numbers and returns
//! a JSON document; the Rust-side functions are usable natively as well.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use uae_core::datamodel::Tokenizer;
use uae_core::eval::text::{normalize_answer, rouge_l, token_f1};
use uae_core::miner::Bm25Index;
use uae_core::retriever::{student_distribution, target_distribution, uae_loss};
use uae_core::UaeError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distributions {
    pub target: Vec<f64>,
    pub student: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnswerScore {
    pub f1: f64,
    pub rouge_l: f64,
    pub normalized: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedDoc {
    pub line: usize,
    pub text: String,
    pub score: f64,
}

/// Parses comma- or whitespace-separated numbers.
pub fn parse_numbers(s: &str) -> Result<Vec<f64>, UaeError> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| UaeError::Config(format!("not a number: {t:?}"))))
        .collect()
}

/// Target and student distributions over one candidate list, plus the
/// cross-entropy between them.
pub fn distributions(
    rewards: &[f64],
    similarities: &[f64],
    lambda: f64,
    tau: f64,
    standardize: bool,
) -> Result<Distributions, UaeError> {
    if rewards.len() != similarities.len() {
        return Err(UaeError::Config(format!(
            "{} rewards but {} similarities",
            rewards.len(),
            similarities.len()
        )));
    }
    let target = target_distribution(rewards, lambda, standardize)?;
    let rows: Vec<[f64; 1]> = similarities.iter().map(|&s| [s]).collect();
    let cands: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let student = student_distribution(&[1.0], &cands, tau)?;
    let loss = uae_loss(&target, &student)?;
    Ok(Distributions { target, student, loss })
}

/// Scores a predicted answer against one gold answer per line.
pub fn score_answer(prediction: &str, answers: &str) -> AnswerScore {
    let gold: Vec<&str> = answers.lines().filter(|l| !l.trim().is_empty()).collect();
    AnswerScore {
        f1: token_f1(prediction, &gold),
        rouge_l: rouge_l(prediction, &gold),
        normalized: normalize_answer(prediction),
    }
}

/// Ranks the non-empty lines of `docs` against `query`, best first; ties keep
/// input order.
pub fn bm25_rank(query: &str, docs: &str, k1: f64, b: f64) -> Result<Vec<RankedDoc>, UaeError> {
    let lines: Vec<(usize, &str)> = docs
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    if lines.is_empty() {
        return Ok(Vec::new());
    }
    if !(k1 >= 0.0 && (0.0..=1.0).contains(&b)) {
        return Err(UaeError::Config(format!("need k1 >= 0 and b in [0, 1], got {k1}, {b}")));
    }
    let texts: Vec<&str> = lines.iter().map(|(_, l)| *l).collect();
    let tok = Tokenizer::build(&texts, 1)?;
    let ids: Vec<String> = (0..lines.len()).map(|i| format!("{i:08}")).collect();
    let toks: Vec<Vec<u32>> = texts.iter().map(|t| tok.tokenize(t)).collect();
    let index = Bm25Index::with_params(ids.iter().map(String::as_str).zip(toks.iter().map(Vec::as_slice)), k1, b)?;
    let scores = index.score_all(&tok.tokenize(query));
    let mut ranked: Vec<RankedDoc> = lines
        .iter()
        .zip(scores)
        .map(|(&(line, text), score)| RankedDoc { line, text: text.to_owned(), score })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.line.cmp(&b.line)));
    Ok(ranked)
}

fn to_js<T: Serialize>(r: Result<T, UaeError>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = distributions)]
pub fn distributions_js(
    rewards: &str,
    similarities: &str,
    lambda: f64,
    tau: f64,
    standardize: bool,
) -> Result<String, JsError> {
    to_js(parse_numbers(rewards).and_then(|r| {
        let s = parse_numbers(similarities)?;
        distributions(&r, &s, lambda, tau, standardize)
    }))
}

#[wasm_bindgen(js_name = scoreAnswer)]
pub fn score_answer_js(prediction: &str, answers: &str) -> Result<String, JsError> {
    to_js(Ok(score_answer(prediction, answers)))
}

#[wasm_bindgen(js_name = bm25Rank)]
pub fn bm25_rank_js(query: &str, docs: &str, k1: f64, b: f64) -> Result<String, JsError> {
    to_js(bm25_rank(query, docs, k1, b))
}
