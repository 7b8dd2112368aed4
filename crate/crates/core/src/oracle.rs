//! Deterministic generator oracle.
//!
//! An add-k smoothed n-gram model trained on token sequences, optionally mixed
//! with an evidence cache: unigram and bigram statistics of the prompt's query
//! and document tokens. The cache is what makes the next-token distribution
//! depend on the retrieved document. With `cache_weight = 0` the model is the
//! plain smoothed n-gram.
//!
//! Utility of a document for an answer is the geometric mean of the per-token
//! conditional probabilities of the answer given `BOS q SEP d SEP`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{is_reserved, Dataset, TokenId, BOS, EOS, SEP};
use crate::error::{Result, UaeError};
use crate::jsonl;
use crate::seed::stream_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub order: usize,
    pub add_k: f64,
    /// Mixture weight of the evidence cache, in `[0, 1)`.
    pub cache_weight: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            order: 2,
            add_k: 0.1,
            cache_weight: 0.5,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.order) {
            return Err(UaeError::Config(format!("n-gram order must be in [1,4], got {}", self.order)));
        }
        if !(self.add_k > 0.0 && self.add_k.is_finite()) {
            return Err(UaeError::Config(format!("add_k must be > 0, got {}", self.add_k)));
        }
        if !(0.0..1.0).contains(&self.cache_weight) {
            return Err(UaeError::Config(format!(
                "cache_weight must be in [0,1), got {}",
                self.cache_weight
            )));
        }
        Ok(())
    }
}

/// Continuation counts for one context.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ContextCounts {
    total: u64,
    next: HashMap<TokenId, u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    cfg: LmConfig,
    vocab_size: usize,
    counts: HashMap<Vec<TokenId>, ContextCounts>,
}

/// Query/document conditioning for one generation or scoring call.
#[derive(Debug, Clone)]
pub struct Prompt {
    /// `BOS q SEP d SEP`
    tokens: Vec<TokenId>,
    unigram: HashMap<TokenId, u32>,
    unigram_total: u32,
    bigram: HashMap<TokenId, (u32, HashMap<TokenId, u32>)>,
}

impl Prompt {
    pub fn new(query: &[TokenId], doc: &[TokenId]) -> Self {
        let mut tokens = Vec::with_capacity(query.len() + doc.len() + 3);
        tokens.push(BOS);
        tokens.extend_from_slice(query);
        tokens.push(SEP);
        tokens.extend_from_slice(doc);
        tokens.push(SEP);

        let mut unigram = HashMap::new();
        let mut unigram_total = 0;
        let mut bigram: HashMap<TokenId, (u32, HashMap<TokenId, u32>)> = HashMap::new();
        for segment in [query, doc] {
            for &t in segment.iter().filter(|&&t| !is_reserved(t)) {
                *unigram.entry(t).or_default() += 1;
                unigram_total += 1;
            }
            for w in segment.windows(2) {
                if is_reserved(w[0]) || is_reserved(w[1]) {
                    continue;
                }
                let slot = bigram.entry(w[0]).or_default();
                slot.0 += 1;
                *slot.1.entry(w[1]).or_default() += 1;
            }
        }
        Prompt {
            tokens,
            unigram,
            unigram_total,
            bigram,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Sparse cache distribution given the previous token; empty when the
    /// prompt has no content tokens.
    fn cache_distribution(&self, prev: TokenId) -> Vec<(TokenId, f64)> {
        if self.unigram_total == 0 {
            return Vec::new();
        }
        let l = f64::from(self.unigram_total);
        let mut out: BTreeMap<TokenId, f64> = BTreeMap::new();
        match self.bigram.get(&prev).filter(|_| !is_reserved(prev)) {
            Some((total, next)) => {
                let b = f64::from(*total);
                for (&t, &c) in &self.unigram {
                    *out.entry(t).or_default() += 0.5 * f64::from(c) / l;
                }
                for (&t, &c) in next {
                    *out.entry(t).or_default() += 0.5 * f64::from(c) / b;
                }
            }
            None => {
                for (&t, &c) in &self.unigram {
                    out.insert(t, f64::from(c) / l);
                }
            }
        }
        out.into_iter().collect()
    }

    fn cache_prob(&self, prev: TokenId, next: TokenId) -> Option<f64> {
        if self.unigram_total == 0 {
            return None;
        }
        let uni = f64::from(self.unigram.get(&next).copied().unwrap_or(0)) / f64::from(self.unigram_total);
        match self.bigram.get(&prev).filter(|_| !is_reserved(prev)) {
            Some((total, nexts)) => {
                let bi = f64::from(nexts.get(&next).copied().unwrap_or(0)) / f64::from(*total);
                Some(0.5 * bi + 0.5 * uni)
            }
            None => Some(uni),
        }
    }
}

/// Anything that assigns next-token probabilities given a prompt and the
/// answer prefix generated so far.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    fn prob(&self, prompt: &Prompt, generated: &[TokenId], next: TokenId) -> f64;

    fn next_distribution(&self, prompt: &Prompt, generated: &[TokenId]) -> Vec<f64> {
        (0..self.vocab_size() as TokenId)
            .map(|x| self.prob(prompt, generated, x))
            .collect()
    }
}

impl NgramLm {
    /// Counts every `order`-length window of each sequence, left-padded with
    /// `order - 1` BOS tokens.
    pub fn train(sequences: &[Vec<TokenId>], vocab_size: usize, cfg: LmConfig) -> Result<Self> {
        cfg.validate()?;
        if sequences.is_empty() {
            return Err(UaeError::Config("cannot train a language model on an empty corpus".into()));
        }
        if vocab_size == 0 {
            return Err(UaeError::Config("vocab_size must be positive".into()));
        }
        let ctx_len = cfg.order - 1;
        let mut counts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
        for seq in sequences {
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(UaeError::Config(format!("token id {bad} outside vocabulary of {vocab_size}")));
            }
            let mut padded = vec![BOS; ctx_len];
            padded.extend_from_slice(seq);
            for t in ctx_len..padded.len() {
                let slot = counts.entry(padded[t - ctx_len..t].to_vec()).or_default();
                slot.total += 1;
                *slot.next.entry(padded[t]).or_default() += 1;
            }
        }
        Ok(NgramLm {
            cfg,
            vocab_size,
            counts,
        })
    }

    pub fn config(&self) -> LmConfig {
        self.cfg
    }

    /// Count of `next` after `context` and the context total.
    pub fn count(&self, context: &[TokenId], next: TokenId) -> (u32, u64) {
        match self.counts.get(context) {
            Some(c) => (c.next.get(&next).copied().unwrap_or(0), c.total),
            None => (0, 0),
        }
    }

    /// Smoothed n-gram probability `(count + k) / (total + k V)`.
    pub fn ngram_prob(&self, context: &[TokenId], next: TokenId) -> f64 {
        let (c, total) = self.count(context, next);
        (f64::from(c) + self.cfg.add_k) / (total as f64 + self.cfg.add_k * self.vocab_size as f64)
    }

    fn ngram_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let (total, next) = match self.counts.get(context) {
            Some(c) => (c.total as f64, Some(&c.next)),
            None => (0.0, None),
        };
        let denom = total + self.cfg.add_k * self.vocab_size as f64;
        let mut dist = vec![self.cfg.add_k / denom; self.vocab_size];
        if let Some(next) = next {
            for (&t, &c) in next {
                dist[t as usize] = (f64::from(c) + self.cfg.add_k) / denom;
            }
        }
        dist
    }

    /// The last `order - 1` tokens of `prompt ++ generated`, BOS-padded.
    fn context(&self, prompt: &Prompt, generated: &[TokenId]) -> Vec<TokenId> {
        let ctx_len = self.cfg.order - 1;
        let mut ctx = Vec::with_capacity(ctx_len);
        let total = prompt.tokens.len() + generated.len();
        for pos in total.saturating_sub(ctx_len)..total {
            ctx.push(if pos < prompt.tokens.len() {
                prompt.tokens[pos]
            } else {
                generated[pos - prompt.tokens.len()]
            });
        }
        while ctx.len() < ctx_len {
            ctx.insert(0, BOS);
        }
        ctx
    }

    fn previous_token(prompt: &Prompt, generated: &[TokenId]) -> TokenId {
        generated
            .last()
            .or_else(|| prompt.tokens.last())
            .copied()
            .unwrap_or(BOS)
    }

    /// Serialized as sorted entries so identical models produce identical files.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<LmEntry> = self
            .counts
            .iter()
            .map(|(ctx, c)| {
                let mut next: Vec<(TokenId, u32)> = c.next.iter().map(|(&t, &n)| (t, n)).collect();
                next.sort_unstable();
                LmEntry {
                    context: ctx.clone(),
                    next,
                }
            })
            .collect();
        entries.sort_by(|a, b| a.context.cmp(&b.context));
        let file = LmFile {
            config: self.cfg,
            vocab_size: self.vocab_size,
            entries,
        };
        jsonl::write_atomic(path, &serde_json::to_vec(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: LmFile = jsonl::read_json(path)?;
        file.config.validate()?;
        let counts = file
            .entries
            .into_iter()
            .map(|e| {
                let total = e.next.iter().map(|&(_, n)| u64::from(n)).sum();
                (
                    e.context,
                    ContextCounts {
                        total,
                        next: e.next.into_iter().collect(),
                    },
                )
            })
            .collect();
        Ok(NgramLm {
            cfg: file.config,
            vocab_size: file.vocab_size,
            counts,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LmEntry {
    context: Vec<TokenId>,
    next: Vec<(TokenId, u32)>,
}

#[derive(Serialize, Deserialize)]
struct LmFile {
    config: LmConfig,
    vocab_size: usize,
    entries: Vec<LmEntry>,
}

impl LanguageModel for NgramLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn prob(&self, prompt: &Prompt, generated: &[TokenId], next: TokenId) -> f64 {
        let p_ngram = self.ngram_prob(&self.context(prompt, generated), next);
        let mu = self.cfg.cache_weight;
        if mu == 0.0 {
            return p_ngram;
        }
        match prompt.cache_prob(Self::previous_token(prompt, generated), next) {
            Some(p_cache) => (1.0 - mu) * p_ngram + mu * p_cache,
            None => p_ngram,
        }
    }

    fn next_distribution(&self, prompt: &Prompt, generated: &[TokenId]) -> Vec<f64> {
        let mut dist = self.ngram_distribution(&self.context(prompt, generated));
        let mu = self.cfg.cache_weight;
        if mu == 0.0 {
            return dist;
        }
        let cache = prompt.cache_distribution(Self::previous_token(prompt, generated));
        if cache.is_empty() {
            return dist;
        }
        for p in dist.iter_mut() {
            *p *= 1.0 - mu;
        }
        for (t, p) in cache {
            dist[t as usize] += mu * p;
        }
        dist
    }
}

/// `exp(mean_t ln p(a_t | BOS q SEP d SEP a_<t))`.
pub fn utility<M: LanguageModel + ?Sized>(
    lm: &M,
    query: &[TokenId],
    doc: &[TokenId],
    answer: &[TokenId],
) -> Result<f64> {
    let prompt = Prompt::new(query, doc);
    utility_with_prompt(lm, &prompt, answer)
}

pub fn utility_with_prompt<M: LanguageModel + ?Sized>(
    lm: &M,
    prompt: &Prompt,
    answer: &[TokenId],
) -> Result<f64> {
    if answer.is_empty() {
        return Err(UaeError::EmptyAnswer);
    }
    let log_sum: f64 = (0..answer.len())
        .map(|t| lm.prob(prompt, &answer[..t], answer[t]).ln())
        .sum();
    Ok((log_sum / answer.len() as f64).exp())
}

/// Arithmetic mean of [`utility`] over the answer set.
pub fn expected_utility<M: LanguageModel + ?Sized>(
    lm: &M,
    query: &[TokenId],
    doc: &[TokenId],
    answers: &[Vec<TokenId>],
) -> Result<f64> {
    if answers.is_empty() {
        return Err(UaeError::EmptyAnswer);
    }
    let prompt = Prompt::new(query, doc);
    let mut sum = 0.0;
    for a in answers {
        sum += utility_with_prompt(lm, &prompt, a)?;
    }
    Ok(sum / answers.len() as f64)
}

/// Greedy decoding: argmax at every step, ties to the lowest token id. Stops
/// before emitting EOS or after `max_len` tokens.
pub fn greedy_decode<M: LanguageModel + ?Sized>(
    lm: &M,
    query: &[TokenId],
    doc: &[TokenId],
    max_len: usize,
) -> Vec<TokenId> {
    let prompt = Prompt::new(query, doc);
    let mut out = Vec::new();
    while out.len() < max_len {
        let dist = lm.next_distribution(&prompt, &out);
        let mut best = 0usize;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = i;
            }
        }
        let tok = best as TokenId;
        if tok == EOS {
            break;
        }
        out.push(tok);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityRecord {
    pub query_id: String,
    pub doc_id: String,
    pub utility: f64,
}

/// `query_id -> doc_id -> utility`, ordered so iteration is deterministic.
pub type UtilityTable = BTreeMap<String, BTreeMap<String, f64>>;

pub fn utility_table(records: &[UtilityRecord]) -> UtilityTable {
    let mut t = UtilityTable::new();
    for r in records {
        t.entry(r.query_id.clone())
            .or_default()
            .insert(r.doc_id.clone(), r.utility);
    }
    t
}

/// Seeded multiplicative log-normal perturbation, `U * exp(sigma * z)`,
/// clipped to `1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityNoise {
    pub sigma: f64,
    pub seed: u64,
}

impl UtilityNoise {
    pub fn apply(&self, query_id: &str, doc_id: &str, utility: f64) -> f64 {
        if self.sigma == 0.0 {
            return utility;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, &[query_id, doc_id]));
        let z: f64 = StandardNormal.sample(&mut rng);
        (utility * (self.sigma * z).exp()).min(1.0)
    }
}

/// Expected utility of every pool document for every query that has a pool,
/// in query order then pool order.
pub fn score_pool<M: LanguageModel + ?Sized>(
    lm: &M,
    dataset: &Dataset,
    noise: Option<UtilityNoise>,
) -> Result<Vec<UtilityRecord>> {
    let mut out = Vec::new();
    for q in &dataset.queries {
        let Some(pool) = dataset.pool(&q.query_id) else {
            continue;
        };
        let q_tokens = dataset.query_tokens(q);
        let answers = dataset.answer_tokens(q);
        for doc_id in &pool.doc_ids {
            let doc = dataset.doc(doc_id).ok_or_else(|| UaeError::DanglingReference {
                context: format!("pool for query {:?}", q.query_id),
                doc_id: doc_id.clone(),
            })?;
            let mut u = expected_utility(lm, &q_tokens, &doc.tokens, &answers)?;
            if let Some(n) = noise {
                u = n.apply(&q.query_id, doc_id, u);
            }
            out.push(UtilityRecord {
                query_id: q.query_id.clone(),
                doc_id: doc_id.clone(),
                utility: u,
            });
        }
    }
    Ok(out)
}

/// Training sequences for the oracle: every corpus document followed by EOS,
/// plus one prompt-formatted example `q SEP gold SEP answer EOS` per answer of
/// each listed query.
pub fn oracle_training_sequences(dataset: &Dataset, instruction_queries: &[&str]) -> Vec<Vec<TokenId>> {
    let mut seqs: Vec<Vec<TokenId>> = dataset
        .corpus
        .iter()
        .map(|d| {
            let mut s = d.tokens.clone();
            s.push(EOS);
            s
        })
        .collect();
    for qid in instruction_queries {
        let Some(q) = dataset.query(qid) else { continue };
        let q_tokens = dataset.query_tokens(q);
        let Some(gold) = q.gold_doc_ids.first().and_then(|g| dataset.doc(g)) else {
            continue;
        };
        let prompt = Prompt::new(&q_tokens, &gold.tokens);
        for a in dataset.answer_tokens(q) {
            let mut s = prompt.tokens().to_vec();
            s.extend_from_slice(&a);
            s.push(EOS);
            seqs.push(s);
        }
    }
    seqs
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]` of the values.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_lo: lo + i as f64 * width,
            bin_hi: lo + (i + 1) as f64 * width,
            count,
        })
        .collect()
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for b in bins {
        s.push_str(&format!("{},{},{}\n", b.bin_lo, b.bin_hi, b.count));
    }
    s
}
