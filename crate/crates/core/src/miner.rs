//! BM25 base similarity and utility-gated hard-negative mining.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::{is_reserved, Dataset, TokenId};
use crate::error::{Result, UaeError};
use crate::reward::RewardScorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    /// Position of the document in ascending doc_id order.
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    postings: Vec<Vec<Posting>>,
    doc_len: Vec<u32>,
    avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn new<'a, I>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [TokenId])>,
    {
        Self::with_params(docs, 1.2, 0.75)
    }

    pub fn with_params<'a, I>(docs: I, k1: f64, b: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [TokenId])>,
    {
        let mut sorted: Vec<(&str, &[TokenId])> = docs.into_iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(UaeError::DuplicateId("duplicate doc_id in BM25 corpus".into()));
        }
        let vocab = sorted
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|&t| t as usize + 1)
            .max()
            .unwrap_or(0);
        let mut postings: Vec<Vec<Posting>> = vec![Vec::new(); vocab];
        let mut doc_len = Vec::with_capacity(sorted.len());
        for (i, (_, toks)) in sorted.iter().enumerate() {
            let mut tf: BTreeMap<TokenId, u32> = BTreeMap::new();
            for &t in toks.iter() {
                *tf.entry(t).or_default() += 1;
            }
            for (t, c) in tf {
                postings[t as usize].push(Posting { doc: i as u32, tf: c });
            }
            doc_len.push(toks.len() as u32);
        }
        let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
        let avg_len = if sorted.is_empty() {
            0.0
        } else {
            total as f64 / sorted.len() as f64
        };
        Ok(Bm25Index {
            doc_ids: sorted.iter().map(|(d, _)| d.to_string()).collect(),
            postings,
            doc_len,
            avg_len,
            k1,
            b,
        })
    }

    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        Self::new(dataset.corpus.iter().map(|d| (d.doc_id.as_str(), d.tokens.as_slice())))
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, which stays positive for every df.
    pub fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn query_terms(q: &[TokenId]) -> BTreeSet<TokenId> {
        q.iter().copied().filter(|&t| !is_reserved(t)).collect()
    }

    /// Dense score vector over documents in ascending doc_id order. Each
    /// distinct non-reserved query term contributes once.
    pub fn score_all(&self, q: &[TokenId]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_ids.len()];
        for t in Self::query_terms(q) {
            let Some(list) = self.postings.get(t as usize) else { continue };
            if list.is_empty() {
                continue;
            }
            let idf = self.idf(list.len());
            for p in list {
                let tf = p.tf as f64;
                let norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[p.doc as usize] as f64 / self.avg_len);
                scores[p.doc as usize] += idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        scores
    }

    /// Scores for the named documents; unknown ids score 0.
    pub fn score_docs(&self, q: &[TokenId], doc_ids: &[&str]) -> Vec<f64> {
        let all = self.score_all(q);
        doc_ids
            .iter()
            .map(|d| {
                self.doc_ids
                    .binary_search_by(|x| x.as_str().cmp(d))
                    .map(|i| all[i])
                    .unwrap_or(0.0)
            })
            .collect()
    }
}

/// Top-k documents with a positive score, descending, ties by ascending
/// doc_id, with excluded ids removed before truncation.
pub fn bm25_topk(index: &Bm25Index, q: &[TokenId], k: usize, exclude: &BTreeSet<&str>) -> Vec<(String, f64)> {
    let scores = index.score_all(q);
    let mut hits: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > 0.0 && !exclude.contains(index.doc_ids[i].as_str()))
        .map(|(i, &s)| (i, s))
        .collect();
    // Positions already follow doc_id order, so a stable sort on score keeps
    // the ascending-id tie rule.
    hits.sort_by(|a, b| b.1.total_cmp(&a.1));
    hits.truncate(k);
    hits.into_iter().map(|(i, s)| (index.doc_ids[i].clone(), s)).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MineOutcome {
    pub negatives: Vec<String>,
    /// Candidates that passed the similarity gate but failed the reward gap.
    pub gate_rejected: usize,
    pub candidates: usize,
}

/// Keeps top-k BM25 candidates (gold excluded) whose reward is more than
/// `delta` below the gold reward, hardest first, at most `m`.
pub fn mine<F>(
    index: &Bm25Index,
    q: &[TokenId],
    gold: &BTreeSet<&str>,
    gold_reward: f64,
    mut reward: F,
    k: usize,
    delta: f64,
    m: usize,
) -> MineOutcome
where
    F: FnMut(&str) -> f64,
{
    let mut out = MineOutcome::default();
    for (doc, _) in bm25_topk(index, q, k, gold) {
        if out.negatives.len() == m {
            break;
        }
        out.candidates += 1;
        if gold_reward - reward(&doc) > delta {
            out.negatives.push(doc);
        } else {
            out.gate_rejected += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DeltaMine {
    /// `factor` times the population standard deviation of the query's pool
    /// rewards.
    PoolStd { factor: f64 },
    Fixed { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinerCfg {
    pub k: usize,
    pub m: usize,
    pub delta: DeltaMine,
}

impl Default for MinerCfg {
    fn default() -> Self {
        MinerCfg {
            k: 20,
            m: 7,
            delta: DeltaMine::PoolStd { factor: 0.5 },
        }
    }
}

impl MinerCfg {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(UaeError::Config("miner k and m must be at least 1".into()));
        }
        if let DeltaMine::PoolStd { factor } = self.delta {
            if !(factor >= 0.0) {
                return Err(UaeError::Config(format!("delta factor must be >= 0, got {factor}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativesRecord {
    pub query_id: String,
    pub negative_doc_ids: Vec<String>,
    pub backfilled: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub queries: usize,
    pub candidates_examined: usize,
    pub gate_rejected: usize,
    pub gated_negatives: usize,
    pub backfilled_queries: usize,
    pub backfilled_negatives: usize,
    pub mean_negatives_per_query: f64,
    pub mean_delta_mine: f64,
}

fn pool_delta(delta: DeltaMine, pool_rewards: &[f64]) -> f64 {
    match delta {
        DeltaMine::Fixed { value } => value,
        DeltaMine::PoolStd { factor } => {
            let n = pool_rewards.len() as f64;
            if n == 0.0 {
                return 0.0;
            }
            let mean = pool_rewards.iter().sum::<f64>() / n;
            let var = pool_rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            factor * var.sqrt()
        }
    }
}

/// Per-query mining state needed both to mine and to audit.
struct QueryContext<'a> {
    q: Vec<TokenId>,
    gold: BTreeSet<&'a str>,
    gold_reward: f64,
    pool_rewards: Vec<(f64, &'a str)>,
    delta: f64,
}

fn query_context<'a>(
    dataset: &'a Dataset,
    scorer: &RewardScorer,
    query_id: &str,
    delta: DeltaMine,
) -> Result<QueryContext<'a>> {
    let ex = dataset
        .query(query_id)
        .ok_or_else(|| UaeError::Ingest(format!("unknown query_id {query_id:?}")))?;
    let pool = dataset
        .pool(query_id)
        .ok_or_else(|| UaeError::Ingest(format!("query {query_id:?} has no candidate pool")))?;
    let q = dataset.query_tokens(ex);
    let gold: BTreeSet<&str> = ex.gold_doc_ids.iter().map(String::as_str).collect();
    let gold_doc = dataset.doc(&ex.gold_doc_ids[0]).expect("validated dataset");
    let gold_reward = scorer.score(&q, &gold_doc.tokens);
    let toks: Vec<&[TokenId]> = pool
        .doc_ids
        .iter()
        .map(|d| dataset.doc(d).expect("validated dataset").tokens.as_slice())
        .collect();
    let scores = scorer.score_many(&q, &toks);
    let delta = pool_delta(delta, &scores);
    let pool_rewards = scores.into_iter().zip(pool.doc_ids.iter().map(String::as_str)).collect();
    Ok(QueryContext {
        q,
        gold,
        gold_reward,
        pool_rewards,
        delta,
    })
}

/// Mines negatives for every listed query. When the gate yields nothing the
/// query is backfilled with its lowest-reward non-gold pool documents.
pub fn mine_all(
    dataset: &Dataset,
    query_ids: &[&str],
    scorer: &RewardScorer,
    index: &Bm25Index,
    cfg: &MinerCfg,
) -> Result<(Vec<NegativesRecord>, MiningReport)> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(query_ids.len());
    let mut report = MiningReport::default();
    let mut delta_sum = 0.0;
    for qid in query_ids {
        let ctx = query_context(dataset, scorer, qid, cfg.delta)?;
        delta_sum += ctx.delta;
        let out = mine(
            index,
            &ctx.q,
            &ctx.gold,
            ctx.gold_reward,
            |d| scorer.score(&ctx.q, &dataset.doc(d).expect("indexed doc").tokens),
            cfg.k,
            ctx.delta,
            cfg.m,
        );
        report.queries += 1;
        report.candidates_examined += out.candidates;
        report.gate_rejected += out.gate_rejected;
        let (negatives, backfilled) = if out.negatives.is_empty() {
            let mut pool: Vec<(f64, &str)> = ctx
                .pool_rewards
                .iter()
                .copied()
                .filter(|(_, d)| !ctx.gold.contains(d))
                .collect();
            pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
            let mut seen = BTreeSet::new();
            let negs: Vec<String> = pool
                .into_iter()
                .filter(|(_, d)| seen.insert(*d))
                .take(cfg.m)
                .map(|(_, d)| d.to_string())
                .collect();
            report.backfilled_queries += 1;
            report.backfilled_negatives += negs.len();
            (negs, true)
        } else {
            report.gated_negatives += out.negatives.len();
            (out.negatives, false)
        };
        records.push(NegativesRecord {
            query_id: qid.to_string(),
            negative_doc_ids: negatives,
            backfilled,
        });
    }
    if report.queries > 0 {
        let total: usize = records.iter().map(|r| r.negative_doc_ids.len()).sum();
        report.mean_negatives_per_query = total as f64 / report.queries as f64;
        report.mean_delta_mine = delta_sum / report.queries as f64;
    }
    Ok((records, report))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningAudit {
    pub checked: usize,
    pub rank_violations: usize,
    pub gap_violations: usize,
    pub gold_negatives: usize,
    pub duplicate_negatives: usize,
}

impl MiningAudit {
    pub fn is_clean(&self) -> bool {
        self.rank_violations == 0 && self.gap_violations == 0 && self.gold_negatives == 0 && self.duplicate_negatives == 0
    }
}

/// Re-derives both gate conditions for every non-backfilled negative, and
/// checks gold exclusion and uniqueness for all records.
pub fn audit_negatives(
    dataset: &Dataset,
    records: &[NegativesRecord],
    scorer: &RewardScorer,
    index: &Bm25Index,
    cfg: &MinerCfg,
) -> Result<MiningAudit> {
    let mut audit = MiningAudit::default();
    for r in records {
        let ctx = query_context(dataset, scorer, &r.query_id, cfg.delta)?;
        let mut seen = BTreeSet::new();
        for d in &r.negative_doc_ids {
            if ctx.gold.contains(d.as_str()) {
                audit.gold_negatives += 1;
            }
            if !seen.insert(d.as_str()) {
                audit.duplicate_negatives += 1;
            }
        }
        if r.backfilled {
            continue;
        }
        let top: BTreeSet<String> = bm25_topk(index, &ctx.q, cfg.k, &ctx.gold).into_iter().map(|(d, _)| d).collect();
        for d in &r.negative_doc_ids {
            audit.checked += 1;
            if !top.contains(d) {
                audit.rank_violations += 1;
            }
            let doc = dataset
                .doc(d)
                .ok_or_else(|| UaeError::DanglingReference {
                    context: format!("negatives for {:?}", r.query_id),
                    doc_id: d.clone(),
                })?;
            if !(ctx.gold_reward - scorer.score(&ctx.q, &doc.tokens) > ctx.delta) {
                audit.gap_violations += 1;
            }
        }
    }
    Ok(audit)
}

/// `query_id -> negatives`, for lookup by the trainer.
pub fn negatives_map(records: &[NegativesRecord]) -> BTreeMap<String, Vec<String>> {
    records
        .iter()
        .map(|r| (r.query_id.clone(), r.negative_doc_ids.clone()))
        .collect()
}
