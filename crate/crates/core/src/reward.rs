//! Pairwise-trained reward scorer.
//!
//! The scorer pools token embeddings for the query and the document, builds
//! the interaction vector `[q; d; q*d; |q-d|]`, and maps it through a
//! one-hidden-layer tanh network to a scalar. All parameters live in one
//! flat vector so the optimizer and gradient checks can treat them uniformly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::datamodel::{Dataset, TokenId, UNK};
use crate::error::{Result, UaeError};
use crate::eval::metrics::{ndcg_at_1_scores, pairwise_counts};
use crate::jsonl;
use crate::optim::Adam;
use crate::retriever::dot;
use crate::oracle::{UtilityRecord, UtilityTable};
use crate::seed::stream_seed;

const MAGIC: &[u8; 6] = b"UAERM1";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RewardScorer {
    vocab: usize,
    dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
struct Forward {
    q: Vec<f64>,
    d: Vec<f64>,
    x: Vec<f64>,
    h: Vec<f64>,
    score: f64,
}

impl RewardScorer {
    /// Scaled-uniform initialization: embeddings in `±sqrt(3/dim)`, dense
    /// layers Glorot-uniform, biases zero.
    pub fn new(vocab: usize, dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || dim == 0 || hidden == 0 {
            return Err(UaeError::Config("reward scorer sizes must be positive".into()));
        }
        let mut s = RewardScorer {
            vocab,
            dim,
            hidden,
            params: vec![0.0; Self::param_count(vocab, dim, hidden)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &["reward-init"]));
        let e = (3.0 / dim as f64).sqrt();
        let w1 = (6.0 / (4 * dim + hidden) as f64).sqrt();
        let w2 = (6.0 / (hidden + 1) as f64).sqrt();
        let (emb_end, w1_end, b1_end, w2_end) = s.offsets();
        for p in &mut s.params[..emb_end] {
            *p = rng.random_range(-e..e);
        }
        for p in &mut s.params[emb_end..w1_end] {
            *p = rng.random_range(-w1..w1);
        }
        for p in &mut s.params[b1_end..w2_end] {
            *p = rng.random_range(-w2..w2);
        }
        Ok(s)
    }

    pub fn param_count(vocab: usize, dim: usize, hidden: usize) -> usize {
        vocab * dim + hidden * 4 * dim + hidden + hidden + 1
    }

    /// End offsets of the embedding table, W1, b1 and w2; b2 is the last
    /// parameter.
    fn offsets(&self) -> (usize, usize, usize, usize) {
        let emb = self.vocab * self.dim;
        let w1 = emb + self.hidden * 4 * self.dim;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.hidden;
        (emb, w1, b1, w2)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn hidden(&self) -> usize {
        self.hidden
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn row(&self, t: TokenId) -> usize {
        let t = t as usize;
        if t < self.vocab {
            t
        } else {
            UNK as usize
        }
    }

    /// Mean of the token embeddings; the zero vector for no tokens.
    fn pool(&self, tokens: &[TokenId]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if tokens.is_empty() {
            return out;
        }
        for &t in tokens {
            let r = self.row(t) * self.dim;
            for (o, e) in out.iter_mut().zip(&self.params[r..r + self.dim]) {
                *o += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    fn head(&self, q: Vec<f64>, d: Vec<f64>) -> Forward {
        let dim = self.dim;
        let mut x = Vec::with_capacity(4 * dim);
        x.extend_from_slice(&q);
        x.extend_from_slice(&d);
        x.extend(q.iter().zip(&d).map(|(a, b)| a * b));
        x.extend(q.iter().zip(&d).map(|(a, b)| (a - b).abs()));
        let (emb, w1_end, b1_end, w2_end) = self.offsets();
        let w1 = &self.params[emb..w1_end];
        let b1 = &self.params[w1_end..b1_end];
        let w2 = &self.params[b1_end..w2_end];
        let mut h = Vec::with_capacity(self.hidden);
        let mut score = self.params[w2_end];
        for k in 0..self.hidden {
            let row = &w1[k * 4 * dim..(k + 1) * 4 * dim];
            let a = b1[k] + dot(row, &x);
            let hk = a.tanh();
            score += w2[k] * hk;
            h.push(hk);
        }
        Forward { q, d, x, h, score }
    }

    fn forward(&self, query: &[TokenId], doc: &[TokenId]) -> Forward {
        self.head(self.pool(query), self.pool(doc))
    }

    pub fn score(&self, query: &[TokenId], doc: &[TokenId]) -> f64 {
        self.forward(query, doc).score
    }

    /// Scores several documents against one query, pooling the query once.
    pub fn score_many(&self, query: &[TokenId], docs: &[&[TokenId]]) -> Vec<f64> {
        let q = self.pool(query);
        docs.iter().map(|d| self.head(q.clone(), self.pool(d)).score).collect()
    }

    /// Adds `upstream * d score / d params` into `grad`.
    fn backward(&self, f: &Forward, query: &[TokenId], doc: &[TokenId], upstream: f64, grad: &mut [f64]) {
        let dim = self.dim;
        let (emb, w1_end, b1_end, w2_end) = self.offsets();
        grad[w2_end] += upstream;
        let mut dx = vec![0.0; 4 * dim];
        for k in 0..self.hidden {
            grad[b1_end + k] += upstream * f.h[k];
            let da = upstream * self.params[b1_end + k] * (1.0 - f.h[k] * f.h[k]);
            grad[w1_end + k] += da;
            let base = emb + k * 4 * dim;
            let row = &self.params[base..base + 4 * dim];
            for (g, x) in grad[base..base + 4 * dim].iter_mut().zip(&f.x) {
                *g += da * x;
            }
            for (d, w) in dx.iter_mut().zip(row) {
                *d += da * w;
            }
        }
        let mut dq = vec![0.0; dim];
        let mut dd = vec![0.0; dim];
        for i in 0..dim {
            let diff = f.q[i] - f.d[i];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            dq[i] = dx[i] + dx[2 * dim + i] * f.d[i] + dx[3 * dim + i] * sign;
            dd[i] = dx[dim + i] + dx[2 * dim + i] * f.q[i] - dx[3 * dim + i] * sign;
        }
        for (tokens, g) in [(query, &dq), (doc, &dd)] {
            if tokens.is_empty() {
                continue;
            }
            let inv = 1.0 / tokens.len() as f64;
            for &t in tokens {
                let r = self.row(t) * dim;
                for i in 0..dim {
                    grad[r + i] += g[i] * inv;
                }
            }
        }
    }

    /// Mean hinge loss over `pairs` plus `0.5 * wd * |params|^2`, and its
    /// gradient. At the kink the zero branch is taken.
    pub fn objective(&self, pairs: &[TrainPair<'_>], margin: f64, wd: f64) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let hinge = self.hinge_objective(pairs, margin, &mut grad);
        let mut loss = hinge;
        if wd != 0.0 {
            let mut sq = 0.0;
            for (g, p) in grad.iter_mut().zip(&self.params) {
                sq += p * p;
                *g += wd * p;
            }
            loss += 0.5 * wd * sq;
        }
        (loss, grad)
    }

    fn hinge_objective(&self, pairs: &[TrainPair<'_>], margin: f64, grad: &mut [f64]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        let inv = 1.0 / pairs.len() as f64;
        let mut total = 0.0;
        for p in pairs {
            let fi = self.forward(p.query, p.d_i);
            let fj = self.forward(p.query, p.d_j);
            let l = hinge_loss(fi.score, fj.score, margin);
            if l > 0.0 {
                total += l;
                self.backward(&fi, p.query, p.d_i, -inv, grad);
                self.backward(&fj, p.query, p.d_j, inv, grad);
            }
        }
        total * inv
    }

    pub fn mean_hinge(&self, pairs: &[TrainPair<'_>], margin: f64) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        pairs
            .iter()
            .map(|p| hinge_loss(self.score(p.query, p.d_i), self.score(p.query, p.d_j), margin))
            .sum::<f64>()
            / pairs.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(self.vocab as u32);
        w.u32(self.dim as u32);
        w.u32(self.hidden as u32);
        w.u64(self.params.len() as u64);
        for &p in &self.params {
            w.f64(p);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, UaeError::Checkpoint);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(UaeError::Checkpoint("not a reward checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(UaeError::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let vocab = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let n = r.u64()? as usize;
        if n != Self::param_count(vocab, dim, hidden) {
            return Err(UaeError::Checkpoint(format!(
                "parameter count {n} does not match dims {vocab}x{dim}, hidden {hidden}"
            )));
        }
        let params = r.f64_vec(n)?;
        r.finish()?;
        Ok(RewardScorer {
            vocab,
            dim,
            hidden,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(UaeError::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| UaeError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `max(0, margin - (s_i - s_j))`.
pub fn hinge_loss(s_i: f64, s_j: f64, margin: f64) -> f64 {
    (margin - (s_i - s_j)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub query_id: String,
    pub d_i: String,
    pub d_j: String,
    pub u_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainCfg {
    pub margin: f64,
    pub eps_u: f64,
    pub pairs_per_query: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for RewardTrainCfg {
    fn default() -> Self {
        RewardTrainCfg {
            margin: 0.1,
            eps_u: 0.02,
            pairs_per_query: 32,
            lr: 1e-3,
            epochs: 30,
            batch_size: 64,
            weight_decay: 1e-5,
            dim: 64,
            hidden: 128,
            seed: 0,
        }
    }
}

impl RewardTrainCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(UaeError::Config(format!("ranking margin must be > 0, got {}", self.margin)));
        }
        if !(self.eps_u >= 0.0) {
            return Err(UaeError::Config(format!("eps_u must be >= 0, got {}", self.eps_u)));
        }
        if self.pairs_per_query == 0 || self.batch_size == 0 || self.dim == 0 || self.hidden == 0 {
            return Err(UaeError::Config(
                "pairs_per_query, batch_size, dim and hidden must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(UaeError::Config("lr must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrupletSet {
    pub quadruplets: Vec<Quadruplet>,
    /// Queries with fewer than two scored documents.
    pub skipped_queries: usize,
}

/// All ordered pairs whose utility gap exceeds `eps_u`, capped per query to
/// the largest gaps. Ties in gap are ordered by `(d_i, d_j)`. Output is
/// grouped by ascending query id.
pub fn build_quadruplets(records: &[UtilityRecord], cfg: &RewardTrainCfg) -> QuadrupletSet {
    let mut by_query: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in records {
        by_query
            .entry(r.query_id.as_str())
            .or_default()
            .insert(r.doc_id.as_str(), r.utility);
    }
    let mut out = QuadrupletSet {
        quadruplets: Vec::new(),
        skipped_queries: 0,
    };
    for (qid, docs) in by_query {
        if docs.len() < 2 {
            out.skipped_queries += 1;
            continue;
        }
        let mut pairs: Vec<(f64, &str, &str)> = Vec::new();
        for (&di, &ui) in &docs {
            for (&dj, &uj) in &docs {
                let gap = ui - uj;
                if di != dj && gap > cfg.eps_u {
                    pairs.push((gap, di, dj));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(b.2)));
        pairs.truncate(cfg.pairs_per_query);
        out.quadruplets.extend(pairs.into_iter().map(|(gap, di, dj)| Quadruplet {
            query_id: qid.to_string(),
            d_i: di.to_string(),
            d_j: dj.to_string(),
            u_gap: gap,
        }));
    }
    out
}

/// A quadruplet with its token sequences resolved.
#[derive(Debug, Clone, Copy)]
pub struct TrainPair<'a> {
    pub query: &'a [TokenId],
    pub d_i: &'a [TokenId],
    pub d_j: &'a [TokenId],
}

/// Token sequences for quadruplets, owned so `TrainPair`s can borrow them.
pub struct ResolvedQuadruplets {
    queries: BTreeMap<String, Vec<TokenId>>,
    quads: Vec<Quadruplet>,
}

impl ResolvedQuadruplets {
    pub fn new(dataset: &Dataset, quads: &[Quadruplet]) -> Result<Self> {
        let mut queries = BTreeMap::new();
        for q in quads {
            if !queries.contains_key(&q.query_id) {
                let ex = dataset
                    .query(&q.query_id)
                    .ok_or_else(|| UaeError::Ingest(format!("unknown query_id {:?}", q.query_id)))?;
                queries.insert(q.query_id.clone(), dataset.query_tokens(ex));
            }
            for d in [&q.d_i, &q.d_j] {
                if dataset.doc(d).is_none() {
                    return Err(UaeError::DanglingReference {
                        context: format!("quadruplet for query {:?}", q.query_id),
                        doc_id: d.clone(),
                    });
                }
            }
        }
        Ok(ResolvedQuadruplets {
            queries,
            quads: quads.to_vec(),
        })
    }

    pub fn pairs<'a>(&'a self, dataset: &'a Dataset) -> Vec<TrainPair<'a>> {
        self.quads
            .iter()
            .map(|q| TrainPair {
                query: &self.queries[&q.query_id],
                d_i: &dataset.doc(&q.d_i).expect("checked in new").tokens,
                d_j: &dataset.doc(&q.d_j).expect("checked in new").tokens,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardTraining {
    pub scorer: RewardScorer,
    /// Mean hinge loss per epoch, measured on each batch before its update.
    pub loss_trace: Vec<f64>,
}

/// Minibatch Adam on mean hinge loss plus weight decay, with seeded
/// initialization and seeded per-epoch shuffling.
pub fn train_reward(pairs: &[TrainPair<'_>], vocab: usize, cfg: &RewardTrainCfg) -> Result<RewardTraining> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(UaeError::Config("no training quadruplets".into()));
    }
    let mut scorer = RewardScorer::new(vocab, cfg.dim, cfg.hidden, cfg.seed)?;
    let mut opt = Adam::new(scorer.params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &["reward-shuffle"]));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pairs[i]));
            let mut grad = vec![0.0; scorer.params.len()];
            let hinge = scorer.hinge_objective(&batch, cfg.margin, &mut grad);
            if !hinge.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(UaeError::NonFinite(format!(
                    "reward loss at epoch {epoch}, batch {b} ({} pairs): {hinge}",
                    batch.len()
                )));
            }
            if cfg.weight_decay != 0.0 {
                for (g, p) in grad.iter_mut().zip(&scorer.params) {
                    *g += cfg.weight_decay * p;
                }
            }
            sum += hinge * batch.len() as f64;
            opt.step(&mut scorer.params, &grad);
        }
        let mean = sum / pairs.len() as f64;
        log::debug!("reward epoch {epoch}: mean hinge {mean:.5}");
        trace.push(mean);
    }
    Ok(RewardTraining {
        scorer,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardValidation {
    pub ndcg_at_1: f64,
    pub pairwise_acc: f64,
    pub queries: usize,
    /// Queries whose utilities are all zero; NDCG@1 is undefined for them.
    pub ndcg_skipped: usize,
    pub pairs: usize,
}

/// NDCG@1 (utility as gain) and micro-averaged pairwise accuracy of any
/// scoring function over the listed queries. Documents are visited in
/// ascending doc_id order, so score ties go to the smallest id.
pub fn score_fidelity<F>(query_ids: &[&str], utilities: &UtilityTable, eps_u: f64, mut score: F) -> RewardValidation
where
    F: FnMut(&str, &[&str]) -> Vec<f64>,
{
    let mut v = RewardValidation::default();
    let mut ndcg_sum = 0.0;
    let mut ndcg_n = 0usize;
    let mut concordant = 0usize;
    for qid in query_ids {
        let Some(table) = utilities.get(*qid) else { continue };
        let docs: Vec<&str> = table.keys().map(String::as_str).collect();
        let utils: Vec<f64> = table.values().copied().collect();
        let scores = score(qid, &docs);
        v.queries += 1;
        match ndcg_at_1_scores(&scores, &utils) {
            Some(n) => {
                ndcg_sum += n;
                ndcg_n += 1;
            }
            None => v.ndcg_skipped += 1,
        }
        let (c, t) = pairwise_counts(&scores, &utils, eps_u);
        concordant += c;
        v.pairs += t;
    }
    if ndcg_n > 0 {
        v.ndcg_at_1 = ndcg_sum / ndcg_n as f64;
    }
    if v.pairs > 0 {
        v.pairwise_acc = concordant as f64 / v.pairs as f64;
    }
    v
}

/// Fidelity of the reward scorer against oracle utilities on held-out
/// queries.
pub fn validate_reward(
    scorer: &RewardScorer,
    dataset: &Dataset,
    query_ids: &[&str],
    utilities: &UtilityTable,
    eps_u: f64,
) -> Result<RewardValidation> {
    for qid in query_ids {
        if dataset.query(qid).is_none() {
            return Err(UaeError::Eval(format!("unknown held-out query {qid:?}")));
        }
    }
    Ok(score_fidelity(query_ids, utilities, eps_u, |qid, docs| {
        let q = dataset.query_tokens(dataset.query(qid).expect("checked above"));
        let toks: Vec<&[TokenId]> = docs
            .iter()
            .map(|d| dataset.doc(d).map(|d| d.tokens.as_slice()).unwrap_or(&[]))
            .collect();
        scorer.score_many(&q, &toks)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRecord {
    pub query_id: String,
    pub doc_id: String,
    pub reward: f64,
}

/// Reward of every pool document for every pooled query, in dataset order.
pub fn score_pools(scorer: &RewardScorer, dataset: &Dataset) -> Vec<RewardRecord> {
    let mut out = Vec::new();
    for pool in &dataset.pools {
        let Some(q) = dataset.query(&pool.query_id) else { continue };
        let qt = dataset.query_tokens(q);
        let toks: Vec<&[TokenId]> = pool
            .doc_ids
            .iter()
            .map(|d| dataset.doc(d).map(|d| d.tokens.as_slice()).unwrap_or(&[]))
            .collect();
        let scores = scorer.score_many(&qt, &toks);
        out.extend(pool.doc_ids.iter().zip(scores).map(|(d, r)| RewardRecord {
            query_id: pool.query_id.clone(),
            doc_id: d.clone(),
            reward: r,
        }));
    }
    out
}

/// `query_id -> doc_id -> reward`.
pub type RewardTable = BTreeMap<String, BTreeMap<String, f64>>;

pub fn reward_table(records: &[RewardRecord]) -> RewardTable {
    let mut t = RewardTable::new();
    for r in records {
        t.entry(r.query_id.clone()).or_default().insert(r.doc_id.clone(), r.reward);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(q: &str, d: &str, u: f64) -> UtilityRecord {
        UtilityRecord {
            query_id: q.into(),
            doc_id: d.into(),
            utility: u,
        }
    }

    fn cfg_eps(eps: f64) -> RewardTrainCfg {
        RewardTrainCfg {
            eps_u: eps,
            ..RewardTrainCfg::default()
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_loss(1.5, 0.0, 1.0), 0.0);
        assert_eq!(hinge_loss(0.3, 0.3, 1.0), 1.0);
        assert!((hinge_loss(0.25, 0.0, 1.0) - 0.75).abs() < 1e-15);
        assert_eq!(hinge_loss(1.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn quadruplet_gap_rule() {
        let r = vec![rec("q", "A", 0.9), rec("q", "B", 0.5), rec("q", "C", 0.48)];
        let qs = build_quadruplets(&r, &cfg_eps(0.05)).quadruplets;
        let pairs: Vec<(&str, &str)> = qs.iter().map(|q| (q.d_i.as_str(), q.d_j.as_str())).collect();
        assert_eq!(pairs, vec![("A", "C"), ("A", "B")]);
        assert!(qs.iter().all(|q| q.u_gap > 0.05));

        let all = build_quadruplets(&r, &cfg_eps(0.0)).quadruplets;
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn quadruplet_cap_keeps_largest_gaps() {
        let utils: Vec<f64> = (0..50).map(|i| ((i * 37 % 50) as f64) / 50.0).collect();
        let r: Vec<_> = utils.iter().enumerate().map(|(i, &u)| rec("q", &format!("d{i:02}"), u)).collect();
        let qs = build_quadruplets(&r, &cfg_eps(0.02)).quadruplets;
        assert_eq!(qs.len(), 32);

        let mut brute = Vec::new();
        for i in 0..50 {
            for j in 0..50 {
                let g = utils[i] - utils[j];
                if g > 0.02 {
                    brute.push((g, format!("d{i:02}"), format!("d{j:02}")));
                }
            }
        }
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let got: Vec<_> = qs.iter().map(|q| (q.u_gap, q.d_i.clone(), q.d_j.clone())).collect();
        assert_eq!(got, brute[..32].to_vec());
    }

    #[test]
    fn single_doc_query_skipped() {
        let r = vec![rec("a", "x", 0.5), rec("b", "x", 0.5), rec("b", "y", 0.1)];
        let s = build_quadruplets(&r, &cfg_eps(0.0));
        assert_eq!(s.skipped_queries, 1);
        assert_eq!(s.quadruplets.len(), 1);
    }

    fn fd_check(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = 8;
        let mut s = RewardScorer::new(vocab, 3, 4, seed).unwrap();
        for p in s.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        let seqs: Vec<Vec<TokenId>> = (0..6)
            .map(|_| {
                let n = rng.random_range(1..5);
                (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
            })
            .collect();
        let pairs: Vec<TrainPair> = (0..3)
            .map(|k| TrainPair {
                query: &seqs[k],
                d_i: &seqs[3 + k],
                d_j: &seqs[(4 + k) % 6],
            })
            .collect();
        let margin = 1.0;
        let wd = 0.01;
        let (_, grad) = s.objective(&pairs, margin, wd);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..s.params.len() {
            let orig = s.params[i];
            s.params[i] = orig + h;
            let lp = s.objective(&pairs, margin, wd).0;
            s.params[i] = orig - h;
            let lm = s.objective(&pairs, margin, wd).0;
            s.params[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let err = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let e = fd_check(seed);
            assert!(e < 1e-5, "seed {seed}: rel err {e}");
        }
    }

    fn toy_pairs() -> (Vec<Vec<TokenId>>, usize) {
        let seqs = vec![
            vec![5, 6, 7],
            vec![5, 6, 8, 9],
            vec![5, 10, 11],
            vec![12, 13, 6],
            vec![14, 15],
        ];
        (seqs, 16)
    }

    #[test]
    fn converges_on_toy_query() {
        let (s, vocab) = toy_pairs();
        let pairs: Vec<TrainPair> = [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]
            .iter()
            .map(|&(i, j)| TrainPair {
                query: &s[0],
                d_i: &s[i],
                d_j: &s[j],
            })
            .collect();
        let cfg = RewardTrainCfg {
            lr: 1e-2,
            epochs: 200,
            batch_size: 64,
            dim: 8,
            hidden: 8,
            margin: 1.0,
            seed: 7,
            ..RewardTrainCfg::default()
        };
        let init = RewardScorer::new(vocab, cfg.dim, cfg.hidden, cfg.seed).unwrap();
        let initial = init.mean_hinge(&pairs, cfg.margin);
        let out = train_reward(&pairs, vocab, &cfg).unwrap();
        let fin = out.scorer.mean_hinge(&pairs, cfg.margin);
        assert!(initial > 0.0);
        assert!(fin < 0.05 * initial, "initial {initial}, final {fin}");
        assert_eq!(out.loss_trace.len(), 200);
        let first: f64 = out.loss_trace[..20].iter().sum();
        let last: f64 = out.loss_trace[180..].iter().sum();
        assert!(last < first);
    }

    #[test]
    fn satisfied_margins_leave_params_unchanged() {
        let (s, vocab) = toy_pairs();
        let cfg = RewardTrainCfg {
            epochs: 3,
            dim: 8,
            hidden: 8,
            weight_decay: 0.0,
            seed: 3,
            ..RewardTrainCfg::default()
        };
        let init = RewardScorer::new(vocab, cfg.dim, cfg.hidden, cfg.seed).unwrap();
        let mut pairs = Vec::new();
        for i in 1..5 {
            for j in 1..5 {
                let (a, b) = (init.score(&s[0], &s[i]), init.score(&s[0], &s[j]));
                if a - b > 0.0 {
                    pairs.push((a - b, TrainPair { query: &s[0], d_i: &s[i], d_j: &s[j] }));
                }
            }
        }
        let min_gap = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let pairs: Vec<TrainPair> = pairs.into_iter().map(|p| p.1).collect();
        let cfg = RewardTrainCfg { margin: min_gap / 2.0, ..cfg };
        let (loss, grad) = init.objective(&pairs, cfg.margin, 0.0);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        let out = train_reward(&pairs, vocab, &cfg).unwrap();
        assert_eq!(out.scorer, init);
    }

    #[test]
    fn kink_uses_zero_branch() {
        let (s, vocab) = toy_pairs();
        let sc = RewardScorer::new(vocab, 4, 4, 1).unwrap();
        let gap = sc.score(&s[0], &s[1]) - sc.score(&s[0], &s[2]);
        let p = [TrainPair { query: &s[0], d_i: &s[1], d_j: &s[2] }];
        let (loss, grad) = sc.objective(&p, gap, 0.0);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn score_is_deterministic_and_finite() {
        let sc = RewardScorer::new(20, 8, 8, 5).unwrap();
        let a = sc.score(&[5, 6], &[7, 8, 9]);
        assert_eq!(a.to_bits(), sc.score(&[5, 6], &[7, 8, 9]).to_bits());
        assert!(sc.score(&[], &[]).is_finite());
        assert!(sc.score(&[999], &[5]).is_finite());
        let many = sc.score_many(&[5, 6], &[&[7, 8, 9], &[10]]);
        assert_eq!(many[0].to_bits(), a.to_bits());
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let sc = RewardScorer::new(12, 4, 3, 9).unwrap();
        let bytes = sc.to_bytes();
        assert_eq!(&bytes[..6], b"UAERM1");
        assert_eq!(RewardScorer::from_bytes(&bytes).unwrap(), sc);
        assert!(matches!(
            RewardScorer::from_bytes(&bytes[..bytes.len() - 3]),
            Err(UaeError::Checkpoint(_))
        ));
        let mut bumped = bytes.clone();
        bumped[6] = 2;
        assert!(matches!(
            RewardScorer::from_bytes(&bumped),
            Err(UaeError::VersionMismatch { expected: 1, found: 2 })
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("reward.ckpt");
        sc.save(&p).unwrap();
        assert_eq!(RewardScorer::load(&p).unwrap(), sc);
    }

    fn table(utils: &[f64]) -> UtilityTable {
        let mut t = UtilityTable::new();
        for (i, &u) in utils.iter().enumerate() {
            t.entry("q".into()).or_default().insert(format!("d{i:04}"), u);
        }
        t
    }

    #[test]
    fn fidelity_of_perfect_and_constant_scorers() {
        let utils = [0.9, 0.1, 0.5, 0.3];
        let t = table(&utils);
        let perfect = score_fidelity(&["q"], &t, 0.02, |_, docs| {
            docs.iter().map(|d| t["q"][*d]).collect()
        });
        assert_eq!((perfect.ndcg_at_1, perfect.pairwise_acc), (1.0, 1.0));
        let constant = score_fidelity(&["q"], &t, 0.02, |_, docs| vec![0.0; docs.len()]);
        assert_eq!(constant.pairwise_acc, 0.0);
    }

    #[test]
    fn random_scorer_is_near_chance() {
        let mut accs = Vec::new();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // 46 docs with distinct utilities give 1035 ordered pairs.
            let utils: Vec<f64> = (0..46).map(|i| i as f64 / 46.0).collect();
            let t = table(&utils);
            let v = score_fidelity(&["q"], &t, 0.0, |_, docs| {
                docs.iter().map(|_| rng.random::<f64>()).collect()
            });
            assert!(v.pairs >= 1000);
            accs.push(v.pairwise_acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }
}
