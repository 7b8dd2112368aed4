//! Shared bi-encoder and the distribution-matching trainer.
//!
//! The encoder mean-pools token embeddings, applies `tanh(W m + b)` and
//! L2-normalizes. Training matches the student softmax over cosine
//! similarities (temperature `tau`) to a target softmax over standardized
//! rewards (temperature `lambda`), using cross-entropy.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::datamodel::{TokenId, Tokenizer, UNK};
use crate::error::{Result, UaeError};
use crate::jsonl;
use crate::optim::Adam;
use crate::seed::stream_seed;

const MAGIC: &[u8; 6] = b"UAEBE1";
const VERSION: u16 = 1;

/// Floor applied to student probabilities before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoder {
    vocab: usize,
    dim: usize,
    params: Vec<f64>,
}

/// Forward-pass values needed to backpropagate one encoding.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    norm: f64,
    pub out: Vec<f64>,
}

impl BiEncoder {
    /// Embeddings uniform in `±sqrt(3/dim)`, projection Glorot-uniform, bias
    /// zero.
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(UaeError::Config("encoder sizes must be positive".into()));
        }
        let mut enc = BiEncoder {
            vocab,
            dim,
            params: vec![0.0; Self::param_count(vocab, dim)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &["encoder-init"]));
        let e = (3.0 / dim as f64).sqrt();
        let w = (6.0 / (2 * dim) as f64).sqrt();
        let emb = vocab * dim;
        for p in &mut enc.params[..emb] {
            *p = rng.random_range(-e..e);
        }
        for p in &mut enc.params[emb..emb + dim * dim] {
            *p = rng.random_range(-w..w);
        }
        Ok(enc)
    }

    pub fn param_count(vocab: usize, dim: usize) -> usize {
        vocab * dim + dim * dim + dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }
    pub fn dim(&self) -> usize {
        self.dim
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

    pub fn encode_cached(&self, tokens: &[TokenId]) -> Result<EncodeCache> {
        if tokens.is_empty() {
            return Err(UaeError::Encode("cannot encode an empty token sequence".into()));
        }
        let d = self.dim;
        let mut pooled = vec![0.0; d];
        for &t in tokens {
            let r = self.row(t) * d;
            for (p, e) in pooled.iter_mut().zip(&self.params[r..r + d]) {
                *p += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);
        let w0 = self.vocab * d;
        let w = &self.params[w0..w0 + d * d];
        let b = &self.params[w0 + d * d..];
        let hidden: Vec<f64> = (0..d)
            .map(|i| {
                let row = &w[i * d..(i + 1) * d];
                (b[i] + row.iter().zip(&pooled).map(|(a, x)| a * x).sum::<f64>()).tanh()
            })
            .collect();
        let norm = hidden.iter().map(|h| h * h).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(UaeError::Encode(format!("degenerate encoding (norm {norm})")));
        }
        let out = hidden.iter().map(|h| h / norm).collect();
        Ok(EncodeCache {
            pooled,
            hidden,
            norm,
            out,
        })
    }

    /// Unit vector for a non-empty token sequence.
    pub fn encode(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.encode_cached(tokens)?.out)
    }

    /// Adds `d <g, encode(tokens)> / d params` into `grad`.
    pub fn backward(&self, cache: &EncodeCache, tokens: &[TokenId], g: &[f64], grad: &mut [f64]) {
        let d = self.dim;
        let dot: f64 = cache.out.iter().zip(g).map(|(o, gi)| o * gi).sum();
        let w0 = self.vocab * d;
        let mut dpool = vec![0.0; d];
        for i in 0..d {
            let dh = (g[i] - cache.out[i] * dot) / cache.norm;
            let dz = dh * (1.0 - cache.hidden[i] * cache.hidden[i]);
            grad[w0 + d * d + i] += dz;
            let row = w0 + i * d;
            for j in 0..d {
                grad[row + j] += dz * cache.pooled[j];
                dpool[j] += dz * self.params[row + j];
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for &t in tokens {
            let r = self.row(t) * d;
            for j in 0..d {
                grad[r + j] += dpool[j] * inv;
            }
        }
    }

    fn write_params(&self, w: &mut Writer) {
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(self.vocab as u32);
        w.u32(self.dim as u32);
        w.u64(self.params.len() as u64);
        for &p in &self.params {
            w.f64(p);
        }
    }

    /// Checkpoint bytes, optionally followed by the tokenizer so a serving
    /// process needs nothing else to encode raw text.
    pub fn to_bytes(&self, tokenizer: Option<&Tokenizer>) -> Vec<u8> {
        let mut w = Writer::default();
        self.write_params(&mut w);
        match tokenizer {
            None => w.u8(0),
            Some(t) => {
                w.u8(1);
                w.u32(t.min_freq() as u32);
                w.u32(t.id_table().len() as u32);
                for s in t.id_table() {
                    w.str(s);
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<Tokenizer>)> {
        let mut r = Reader::new(bytes, UaeError::Checkpoint);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(UaeError::Checkpoint("not an encoder checkpoint (bad magic)".into()));
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
        let n = r.u64()? as usize;
        if n != Self::param_count(vocab, dim) {
            return Err(UaeError::Checkpoint(format!(
                "parameter count {n} does not match {vocab}x{dim}"
            )));
        }
        let params = r.f64_vec(n)?;
        let tokenizer = match r.u8()? {
            0 => None,
            1 => {
                let min_freq = r.u32()? as usize;
                let count = r.u32()? as usize;
                let mut table = Vec::with_capacity(count.min(1 << 20));
                for _ in 0..count {
                    table.push(r.str()?);
                }
                Some(Tokenizer::from_id_table(table, min_freq)?)
            }
            f => return Err(UaeError::Checkpoint(format!("unknown tokenizer flag {f}"))),
        };
        r.finish()?;
        if let Some(t) = &tokenizer {
            if t.len() != vocab {
                return Err(UaeError::Checkpoint(format!(
                    "tokenizer has {} entries, encoder vocab is {vocab}",
                    t.len()
                )));
            }
        }
        Ok((BiEncoder { vocab, dim, params }, tokenizer))
    }

    pub fn save(&self, path: &Path, tokenizer: Option<&Tokenizer>) -> Result<()> {
        jsonl::write_atomic(path, &self.to_bytes(tokenizer))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Tokenizer>)> {
        if !path.exists() {
            return Err(UaeError::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| UaeError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `softmax(lambda * r)`, where `r` is z-scored within the set when
/// `standardize` is on (all zeros if the rewards are constant).
pub fn target_distribution(rewards: &[f64], lambda: f64, standardize: bool) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(UaeError::Config(format!(
            "target distribution needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(UaeError::NonFinite(format!("reward {r}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(UaeError::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let scaled: Vec<f64> = if standardize {
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        if std > 0.0 {
            rewards.iter().map(|r| lambda * ((r - mean) / std)).collect()
        } else {
            vec![0.0; rewards.len()]
        }
    } else {
        rewards.iter().map(|r| lambda * r).collect()
    };
    Ok(softmax(&scaled))
}

/// Dot product over the common prefix, with four accumulators so the loop
/// vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut xs = a.chunks_exact(4);
    let mut ys = b.chunks_exact(4);
    for (x, y) in xs.by_ref().zip(ys.by_ref()) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = xs.remainder().iter().zip(ys.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `softmax(<q, d_i> / tau)`.
pub fn student_distribution(q: &[f64], candidates: &[&[f64]], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(UaeError::Config(format!("tau must be > 0, got {tau}")));
    }
    let logits: Vec<f64> = candidates.iter().map(|c| dot(q, c) / tau).collect();
    Ok(softmax(&logits))
}

/// Cross-entropy `-sum target * ln max(student, 1e-12)`.
pub fn uae_loss(target: &[f64], student: &[f64]) -> Result<f64> {
    if target.len() != student.len() {
        return Err(UaeError::Config(format!(
            "distribution lengths differ: {} vs {}",
            target.len(),
            student.len()
        )));
    }
    Ok(-target
        .iter()
        .zip(student)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Gradient of `uae_loss(target, softmax(logits))` with respect to the
/// logits, honouring the probability floor.
pub fn loss_logit_grad(target: &[f64], student: &[f64]) -> Vec<f64> {
    let gp: Vec<f64> = target
        .iter()
        .zip(student)
        .map(|(&t, &p)| if p >= PROB_FLOOR && t != 0.0 { -t / p } else { 0.0 })
        .collect();
    let inner: f64 = gp.iter().zip(student).map(|(g, p)| g * p).sum();
    student.iter().zip(&gp).map(|(p, g)| p * (g - inner)).collect()
}

/// One query's candidate set. `candidates` index into the document table
/// handed to the trainer; `target` is aligned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillExample {
    pub query: Vec<TokenId>,
    pub candidates: Vec<usize>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub loss: f64,
    pub kl: f64,
}

impl BiEncoder {
    /// Mean cross-entropy over `batch` and its gradient. Each distinct
    /// document in the batch is encoded once. With `cross_batch` every query
    /// also sees the other queries' candidates, with zero target mass.
    pub fn batch_objective(
        &self,
        batch: &[&DistillExample],
        docs: &[&[TokenId]],
        tau: f64,
        cross_batch: bool,
        grad: &mut [f64],
    ) -> Result<BatchStats> {
        if !(tau > 0.0) {
            return Err(UaeError::Config(format!("tau must be > 0, got {tau}")));
        }
        let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
        for ex in batch {
            for &c in &ex.candidates {
                let n = slots.len();
                slots.entry(c).or_insert(n);
            }
        }
        let mut doc_cache: Vec<Option<EncodeCache>> = vec![None; slots.len()];
        for (&doc, &slot) in &slots {
            let tokens = docs
                .get(doc)
                .ok_or_else(|| UaeError::Encode(format!("candidate index {doc} out of range")))?;
            doc_cache[slot] = Some(self.encode_cached(tokens)?);
        }
        let doc_cache: Vec<EncodeCache> = doc_cache.into_iter().map(|c| c.expect("every slot filled")).collect();
        let mut doc_grad = vec![vec![0.0; self.dim]; slots.len()];
        let inv_b = 1.0 / batch.len() as f64;
        let mut stats = BatchStats::default();
        for ex in batch {
            if ex.candidates.len() != ex.target.len() {
                return Err(UaeError::Config("candidate and target lengths differ".into()));
            }
            let qc = self.encode_cached(&ex.query)?;
            let mut cand: Vec<usize> = ex.candidates.iter().map(|c| slots[c]).collect();
            let mut target = ex.target.clone();
            if cross_batch {
                let own: std::collections::BTreeSet<usize> = cand.iter().copied().collect();
                for slot in 0..slots.len() {
                    if !own.contains(&slot) {
                        cand.push(slot);
                        target.push(0.0);
                    }
                }
            }
            let vecs: Vec<&[f64]> = cand.iter().map(|&s| doc_cache[s].out.as_slice()).collect();
            let p = student_distribution(&qc.out, &vecs, tau)?;
            let loss = uae_loss(&target, &p)?;
            stats.loss += loss * inv_b;
            stats.kl += (loss - entropy(&target)) * inv_b;
            let ds = loss_logit_grad(&target, &p);
            let mut gq = vec![0.0; self.dim];
            for (k, &s) in cand.iter().enumerate() {
                let coef = ds[k] * inv_b / tau;
                if coef == 0.0 {
                    continue;
                }
                for i in 0..self.dim {
                    gq[i] += coef * doc_cache[s].out[i];
                    doc_grad[s][i] += coef * qc.out[i];
                }
            }
            self.backward(&qc, &ex.query, &gq, grad);
        }
        for (&doc, &slot) in &slots {
            self.backward(&doc_cache[slot], docs[doc], &doc_grad[slot], grad);
        }
        Ok(stats)
    }

    /// Batch loss plus `0.5 * wd * |params|^2`, with its gradient.
    pub fn objective(
        &self,
        batch: &[&DistillExample],
        docs: &[&[TokenId]],
        tau: f64,
        wd: f64,
        cross_batch: bool,
    ) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let stats = self.batch_objective(batch, docs, tau, cross_batch, &mut grad)?;
        let mut loss = stats.loss;
        if wd != 0.0 {
            for (g, p) in grad.iter_mut().zip(&self.params) {
                *g += wd * p;
                loss += 0.5 * wd * p * p;
            }
        }
        Ok((loss, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillCfg {
    pub lambda: f64,
    pub tau: f64,
    pub standardize_rewards: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dim: usize,
    pub cross_batch_negatives: bool,
    pub seed: u64,
}

impl Default for DistillCfg {
    fn default() -> Self {
        DistillCfg {
            lambda: 5.0,
            tau: 0.05,
            standardize_rewards: true,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: 30,
            dim: 64,
            cross_batch_negatives: false,
            seed: 0,
        }
    }
}

impl DistillCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(UaeError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(UaeError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(UaeError::Config("lr must be > 0 and weight_decay >= 0".into()));
        }
        if self.batch_size == 0 || self.dim == 0 {
            return Err(UaeError::Config("batch_size and dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_kl: f64,
}

pub fn trace_csv(trace: &[EpochTrace]) -> String {
    let mut s = String::from("epoch,mean_loss,mean_kl\n");
    for t in trace {
        s.push_str(&format!("{},{},{}\n", t.epoch, t.mean_loss, t.mean_kl));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTraining {
    pub encoder: BiEncoder,
    pub trace: Vec<EpochTrace>,
}

fn train_loop<F>(vocab: usize, docs: &[&[TokenId]], cfg: &DistillCfg, label: &str, mut epoch_examples: F) -> Result<EncoderTraining>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<DistillExample>>,
{
    cfg.validate()?;
    let mut enc = BiEncoder::new(vocab, cfg.dim, cfg.seed)?;
    let mut opt = Adam::new(enc.params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[label, "shuffle"]));
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let examples = epoch_examples(epoch, &mut rng)?;
        if examples.is_empty() {
            return Err(UaeError::Config("no training examples".into()));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut kl_sum) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&DistillExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut grad = vec![0.0; enc.params.len()];
            let stats = enc.batch_objective(&batch, docs, cfg.tau, cfg.cross_batch_negatives, &mut grad)?;
            if !stats.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(UaeError::NonFinite(format!(
                    "{label} loss at epoch {epoch}, batch {b} ({} queries, first query tokens {:?}): {}",
                    batch.len(),
                    batch[0].query,
                    stats.loss
                )));
            }
            if cfg.weight_decay != 0.0 {
                for (g, p) in grad.iter_mut().zip(&enc.params) {
                    *g += cfg.weight_decay * p;
                }
            }
            opt.step(&mut enc.params, &grad);
            loss_sum += stats.loss * batch.len() as f64;
            kl_sum += stats.kl * batch.len() as f64;
        }
        let n = examples.len() as f64;
        let t = EpochTrace {
            epoch,
            mean_loss: loss_sum / n,
            mean_kl: kl_sum / n,
        };
        log::debug!("{label} epoch {epoch}: loss {:.5} kl {:.5}", t.mean_loss, t.mean_kl);
        trace.push(t);
    }
    Ok(EncoderTraining { encoder: enc, trace })
}

/// Distillation training on fixed candidate sets.
pub fn train_distill(examples: &[DistillExample], docs: &[&[TokenId]], vocab: usize, cfg: &DistillCfg) -> Result<EncoderTraining> {
    if examples.is_empty() {
        return Err(UaeError::Config("no training examples".into()));
    }
    train_loop(vocab, docs, cfg, "distill", |_, _| Ok(examples.to_vec()))
}

/// One query for the contrastive baseline: its gold document and the
/// documents that may not be sampled as its negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveQuery {
    pub query: Vec<TokenId>,
    pub gold: usize,
    pub excluded: Vec<usize>,
}

/// Standard InfoNCE: one-hot target on the gold document against
/// `num_negatives` uniformly random corpus documents, redrawn every epoch.
pub fn train_infonce(
    queries: &[ContrastiveQuery],
    docs: &[&[TokenId]],
    vocab: usize,
    num_negatives: usize,
    cfg: &DistillCfg,
) -> Result<EncoderTraining> {
    if queries.is_empty() {
        return Err(UaeError::Config("no training queries".into()));
    }
    if docs.len() <= num_negatives {
        return Err(UaeError::Config("corpus too small for the requested negatives".into()));
    }
    let all: Vec<usize> = (0..docs.len()).collect();
    train_loop(vocab, docs, cfg, "infonce", |_, rng| {
        Ok(queries
            .iter()
            .map(|q| {
                let mut cands = vec![q.gold];
                while cands.len() < num_negatives + 1 {
                    let d = *all.choose(rng).expect("non-empty corpus");
                    if !cands.contains(&d) && !q.excluded.contains(&d) {
                        cands.push(d);
                    }
                }
                let mut target = vec![0.0; cands.len()];
                target[0] = 1.0;
                DistillExample {
                    query: q.query.clone(),
                    candidates: cands,
                    target,
                }
            })
            .collect())
    })
}
