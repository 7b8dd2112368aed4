//! Ranked-retrieval and scorer-fidelity metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UaeError};
use crate::oracle::UtilityTable;

/// `query_id -> ranked doc_ids`.
pub type RunRanking = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    /// A document is relevant iff it is one of the query's gold documents.
    #[default]
    Gold,
    /// A document is relevant iff its oracle utility is at least the threshold.
    UtilityThreshold,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryJudgment {
    pub gold: BTreeSet<String>,
    pub utilities: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Judgments {
    pub queries: BTreeMap<String, QueryJudgment>,
    pub threshold: f64,
    pub relevance: Relevance,
}

impl Judgments {
    pub fn new(threshold: f64, relevance: Relevance) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(UaeError::Config(format!("relevance threshold {threshold} outside [0, 1]")));
        }
        Ok(Judgments {
            queries: BTreeMap::new(),
            threshold,
            relevance,
        })
    }

    pub fn with_gold<I, S>(mut self, query_id: &str, gold: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let j = self.queries.entry(query_id.to_string()).or_default();
        j.gold.extend(gold.into_iter().map(Into::into));
        self
    }

    pub fn set_utilities(&mut self, table: &UtilityTable) {
        for (qid, utils) in table {
            let j = self.queries.entry(qid.clone()).or_default();
            j.utilities.extend(utils.iter().map(|(d, u)| (d.clone(), *u)));
        }
    }

    pub fn relevant(&self, query_id: &str) -> BTreeSet<&str> {
        let Some(j) = self.queries.get(query_id) else {
            return BTreeSet::new();
        };
        match self.relevance {
            Relevance::Gold => j.gold.iter().map(String::as_str).collect(),
            Relevance::UtilityThreshold => j
                .utilities
                .iter()
                .filter(|(_, &u)| u >= self.threshold)
                .map(|(d, _)| d.as_str())
                .collect(),
        }
    }
}

/// A metric averaged over queries, with the ids of queries that were scored
/// 0 or skipped because of missing data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub evaluated: usize,
    pub flagged: Vec<String>,
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of judged queries whose top-k holds at least one relevant
/// document. Queries missing from the run count as 0 and are flagged.
pub fn recall_at_k(run: &RunRanking, judgments: &Judgments, k: usize) -> Result<MetricValue> {
    if k == 0 {
        return Err(UaeError::Config("recall cutoff k must be at least 1".into()));
    }
    let mut out = MetricValue::default();
    let mut sum = 0.0;
    for qid in judgments.queries.keys() {
        out.evaluated += 1;
        let Some(ranked) = run.get(qid) else {
            out.flagged.push(qid.clone());
            continue;
        };
        let rel = judgments.relevant(qid);
        if ranked.iter().take(k).any(|d| rel.contains(d.as_str())) {
            sum += 1.0;
        }
    }
    out.value = mean(sum, out.evaluated);
    Ok(out)
}

/// Average precision of one ranking; `None` without relevant documents.
pub fn average_precision(ranked: &[String], relevant: &BTreeSet<&str>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranked.iter().enumerate() {
        if relevant.contains(d.as_str()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

/// Mean AP over queries with at least one relevant document; the others are
/// skipped and flagged. Queries missing from the run score 0 and are flagged.
pub fn mean_average_precision(run: &RunRanking, judgments: &Judgments) -> MetricValue {
    let mut out = MetricValue::default();
    let mut sum = 0.0;
    for qid in judgments.queries.keys() {
        let rel = judgments.relevant(qid);
        if rel.is_empty() {
            out.flagged.push(qid.clone());
            continue;
        }
        out.evaluated += 1;
        match run.get(qid) {
            Some(ranked) => sum += average_precision(ranked, &rel).unwrap_or(0.0),
            None => out.flagged.push(qid.clone()),
        }
    }
    out.value = mean(sum, out.evaluated);
    out
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Utility of the top-scored document over the best utility in the pool.
/// `None` when every utility is zero.
pub fn ndcg_at_1_scores(scores: &[f64], utilities: &[f64]) -> Option<f64> {
    debug_assert_eq!(scores.len(), utilities.len());
    let max_u = utilities.iter().copied().fold(0.0, f64::max);
    if max_u <= 0.0 {
        return None;
    }
    argmax(scores).map(|i| utilities[i] / max_u)
}

/// NDCG@1 of a run against utility gains. Queries with all-zero utilities or
/// absent from the run are skipped and flagged.
pub fn ndcg_at_1(run: &RunRanking, utilities: &UtilityTable) -> MetricValue {
    let mut out = MetricValue::default();
    let mut sum = 0.0;
    for (qid, utils) in utilities {
        let max_u = utils.values().copied().fold(0.0, f64::max);
        let top = run.get(qid).and_then(|r| r.first());
        match top {
            Some(d) if max_u > 0.0 => {
                out.evaluated += 1;
                sum += utils.get(d).copied().unwrap_or(0.0) / max_u;
            }
            _ => out.flagged.push(qid.clone()),
        }
    }
    out.value = mean(sum, out.evaluated);
    out
}

/// Concordant pairs and total pairs among documents whose utility gap
/// exceeds `eps_u`. A pair is concordant only if the higher-utility document
/// scores strictly higher.
pub fn pairwise_counts(scores: &[f64], utilities: &[f64], eps_u: f64) -> (usize, usize) {
    debug_assert_eq!(scores.len(), utilities.len());
    let mut concordant = 0;
    let mut total = 0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if utilities[i] - utilities[j] > eps_u {
                total += 1;
                if scores[i] > scores[j] {
                    concordant += 1;
                }
            }
        }
    }
    (concordant, total)
}

/// Micro-averaged pairwise accuracy over several queries, each given as
/// aligned `(scores, utilities)`.
pub fn pairwise_accuracy<'a, I>(queries: I, eps_u: f64) -> f64
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let (mut c, mut t) = (0usize, 0usize);
    for (s, u) in queries {
        let (ci, ti) = pairwise_counts(s, u, eps_u);
        c += ci;
        t += ti;
    }
    if t == 0 {
        0.0
    } else {
        c as f64 / t as f64
    }
}

/// Mean utility of each query's rank-1 document. `lookup` supplies utilities
/// that are not in the table; if it fails the query scores 0 and is flagged.
pub fn exp_util_at_1<F>(run: &RunRanking, utilities: &UtilityTable, mut lookup: F) -> MetricValue
where
    F: FnMut(&str, &str) -> Result<f64>,
{
    let mut out = MetricValue::default();
    let mut sum = 0.0;
    for (qid, ranked) in run {
        out.evaluated += 1;
        let Some(top) = ranked.first() else {
            out.flagged.push(qid.clone());
            continue;
        };
        let known = utilities.get(qid).and_then(|u| u.get(top)).copied();
        match known.map(Ok).unwrap_or_else(|| lookup(qid, top)) {
            Ok(u) => sum += u,
            Err(_) => out.flagged.push(qid.clone()),
        }
    }
    out.value = mean(sum, out.evaluated);
    out
}
