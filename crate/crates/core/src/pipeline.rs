//! File-backed pipeline stages. Each stage reads the artifacts of earlier
//! stages from the configured directories, validates them and writes its own.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::datamodel::{load_dataset, Dataset, LoadOptions, TokenId, Tokenizer};
use crate::error::{Result, UaeError};
use crate::eval::{
    exp_util_at_1, generation_eval, latency_bench, mean_average_precision, ndcg_at_1, pairwise_counts, recall_at_k,
    time_path, write_run, EvalReport, Judgments, LatencyReport, MethodMetrics, RunRanking,
};
use crate::index::VectorIndex;
use crate::jsonl;
use crate::miner::{mine_all, Bm25Index, MiningReport, NegativesRecord};
use crate::oracle::{
    expected_utility, histogram, histogram_csv, oracle_training_sequences, score_pool, utility_table, NgramLm,
    UtilityNoise, UtilityRecord, UtilityTable,
};
use crate::retriever::{
    dot, target_distribution, trace_csv, train_distill, train_infonce, BiEncoder, ContrastiveQuery, DistillExample,
};
use crate::reward::{
    build_quadruplets, score_fidelity, score_pools, train_reward, validate_reward, ResolvedQuadruplets, RewardScorer, RewardValidation,
};
use crate::synth::generate_synthetic;

pub const MANIFEST_VERSION: u32 = 1;

pub const MANIFEST: &str = "manifest.json";
pub const TOKENIZER: &str = "tokenizer.json";
pub const ORACLE: &str = "oracle.json";
pub const UTILITIES: &str = "utilities.jsonl";
pub const UTILITY_HIST: &str = "utility_hist.csv";
pub const UTILITY_AUDIT: &str = "utility_audit.json";
pub const REWARD_MODEL: &str = "reward.bin";
pub const REWARD_TRACE: &str = "reward_trace.csv";
pub const REWARD_VALIDATION: &str = "reward_validation.json";
pub const REWARDS: &str = "rewards.jsonl";
pub const NEGATIVES: &str = "negatives.jsonl";
pub const MINING_REPORT: &str = "mining_report.json";
pub const ENCODER: &str = "encoder.bin";
pub const ENCODER_TRACE: &str = "training_trace.csv";
pub const BASELINE_ENCODER: &str = "encoder_infonce.bin";
pub const BASELINE_TRACE: &str = "infonce_trace.csv";
pub const INDEX: &str = "index.bin";
pub const RUN: &str = "run.jsonl";
pub const LATENCY: &str = "latency.json";

/// Written by `ingest`; every later stage checks it against the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub docs: usize,
    pub queries: usize,
    pub vocab_size: usize,
    pub train_queries: Vec<String>,
    pub held_out_queries: Vec<String>,
}

impl Manifest {
    pub fn train_ids(&self) -> Vec<&str> {
        self.train_queries.iter().map(String::as_str).collect()
    }
    pub fn held_out_ids(&self) -> Vec<&str> {
        self.held_out_queries.iter().map(String::as_str).collect()
    }
}

pub fn run_synth(cfg: &PipelineConfig) -> Result<()> {
    let data = generate_synthetic(&cfg.synth)?;
    jsonl::ensure_dir(&cfg.paths.data_dir)?;
    data.write(&cfg.paths.corpus(), &cfg.paths.queries(), &cfg.paths.pools())?;
    info!(
        "synth: {} docs, {} queries written to {}",
        data.corpus.len(),
        data.queries.len(),
        cfg.paths.data_dir.display()
    );
    Ok(())
}

pub fn load_data(cfg: &PipelineConfig) -> Result<Dataset> {
    let opts = LoadOptions {
        pool_size: cfg.data.pool_size,
        min_freq: cfg.data.min_freq,
    };
    load_dataset(&cfg.paths.corpus(), &cfg.paths.queries(), &cfg.paths.pools(), opts)
}

/// Seeded held-out split over the queries that have pools.
pub fn split_queries(dataset: &Dataset, fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut ids: Vec<&str> = dataset
        .queries
        .iter()
        .filter(|q| dataset.pool(&q.query_id).is_some())
        .map(|q| q.query_id.as_str())
        .collect();
    ids.sort_unstable();
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = (fraction * ids.len() as f64).round() as usize;
    let held: BTreeSet<&str> = shuffled.into_iter().take(n_held).collect();
    let (mut train, mut held_out) = (Vec::new(), Vec::new());
    for id in ids {
        if held.contains(id) {
            held_out.push(id.to_string());
        } else {
            train.push(id.to_string());
        }
    }
    (train, held_out)
}

pub fn run_ingest(cfg: &PipelineConfig) -> Result<Manifest> {
    let ds = load_data(cfg)?;
    let (train, held_out) = split_queries(&ds, cfg.data.held_out_fraction, cfg.stage_seed("split"));
    if train.is_empty() {
        return Err(UaeError::Ingest("no training queries with pools".into()));
    }
    let manifest = Manifest {
        schema_version: MANIFEST_VERSION,
        docs: ds.corpus.len(),
        queries: ds.queries.len(),
        vocab_size: ds.tokenizer.len(),
        train_queries: train,
        held_out_queries: held_out,
    };
    jsonl::ensure_dir(&cfg.paths.artifacts_dir)?;
    ds.tokenizer.save(&cfg.paths.artifact(TOKENIZER))?;
    jsonl::write_json(&cfg.paths.artifact(MANIFEST), &manifest)?;
    info!(
        "ingest: {} docs, {} queries ({} train, {} held out), vocab {}",
        manifest.docs,
        manifest.queries,
        manifest.train_queries.len(),
        manifest.held_out_queries.len(),
        manifest.vocab_size
    );
    Ok(manifest)
}

/// Loads the dataset and checks it against the ingest manifest.
pub fn open(cfg: &PipelineConfig) -> Result<(Dataset, Manifest)> {
    let manifest: Manifest = jsonl::read_json(&cfg.paths.artifact(MANIFEST))?;
    if manifest.schema_version != MANIFEST_VERSION {
        return Err(UaeError::Ingest(format!(
            "manifest schema version {} (expected {MANIFEST_VERSION}); re-run ingest",
            manifest.schema_version
        )));
    }
    let ds = load_data(cfg)?;
    if ds.corpus.len() != manifest.docs || ds.queries.len() != manifest.queries || ds.tokenizer.len() != manifest.vocab_size {
        return Err(UaeError::Ingest("dataset files changed since ingest; re-run ingest".into()));
    }
    Ok((ds, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityAudit {
    pub queries: usize,
    /// Queries whose gold utility beats the median non-gold pool utility.
    pub gold_above_median: usize,
    pub fraction: f64,
}

pub fn utility_audit(ds: &Dataset, table: &UtilityTable) -> UtilityAudit {
    let mut audit = UtilityAudit {
        queries: 0,
        gold_above_median: 0,
        fraction: 0.0,
    };
    for q in &ds.queries {
        let Some(utils) = table.get(&q.query_id) else { continue };
        let Some(gold) = q.gold_doc_ids.iter().find_map(|g| utils.get(g)) else { continue };
        let mut others: Vec<f64> = utils
            .iter()
            .filter(|(d, _)| !q.gold_doc_ids.contains(d))
            .map(|(_, &u)| u)
            .collect();
        if others.is_empty() {
            continue;
        }
        others.sort_by(f64::total_cmp);
        let n = others.len();
        let median = if n % 2 == 1 {
            others[n / 2]
        } else {
            0.5 * (others[n / 2 - 1] + others[n / 2])
        };
        audit.queries += 1;
        if *gold > median {
            audit.gold_above_median += 1;
        }
    }
    if audit.queries > 0 {
        audit.fraction = audit.gold_above_median as f64 / audit.queries as f64;
    }
    audit
}

pub fn run_score_utility(cfg: &PipelineConfig) -> Result<UtilityAudit> {
    let (ds, manifest) = open(cfg)?;
    let seqs = oracle_training_sequences(&ds, &manifest.train_ids());
    let lm = NgramLm::train(&seqs, ds.tokenizer.len(), cfg.oracle.lm)?;
    let noise = (cfg.oracle.noise_sigma > 0.0).then(|| UtilityNoise {
        sigma: cfg.oracle.noise_sigma,
        seed: cfg.stage_seed("utility-noise"),
    });
    let records = score_pool(&lm, &ds, noise)?;
    lm.save(&cfg.paths.artifact(ORACLE))?;
    jsonl::write_records(&cfg.paths.artifact(UTILITIES), &records)?;
    let values: Vec<f64> = records.iter().map(|r| r.utility).collect();
    let hist = histogram(&values, cfg.oracle.histogram_bins);
    jsonl::write_atomic(&cfg.paths.artifact(UTILITY_HIST), histogram_csv(&hist).as_bytes())?;
    let audit = utility_audit(&ds, &utility_table(&records));
    jsonl::write_json(&cfg.paths.artifact(UTILITY_AUDIT), &audit)?;
    info!(
        "score-utility: {} records; gold above median distractor for {:.3} of queries",
        records.len(),
        audit.fraction
    );
    Ok(audit)
}

fn read_utilities(cfg: &PipelineConfig) -> Result<Vec<UtilityRecord>> {
    jsonl::read_records(&cfg.paths.artifact(UTILITIES))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStageReport {
    pub quadruplets: usize,
    pub skipped_queries: usize,
    pub final_loss: f64,
    pub held_out: RewardValidation,
    pub bm25_held_out: RewardValidation,
}

pub fn run_train_reward(cfg: &PipelineConfig) -> Result<RewardStageReport> {
    let (ds, manifest) = open(cfg)?;
    let records = read_utilities(cfg)?;
    let train: BTreeSet<&str> = manifest.train_ids().into_iter().collect();
    let train_records: Vec<UtilityRecord> = records
        .iter()
        .filter(|r| train.contains(r.query_id.as_str()))
        .cloned()
        .collect();
    let quads = build_quadruplets(&train_records, &cfg.reward);
    let resolved = ResolvedQuadruplets::new(&ds, &quads.quadruplets)?;
    let training = train_reward(&resolved.pairs(&ds), ds.tokenizer.len(), &cfg.reward)?;
    let scorer = training.scorer;

    let table = utility_table(&records);
    let held = manifest.held_out_ids();
    let held_out = validate_reward(&scorer, &ds, &held, &table, cfg.reward.eps_u)?;
    let bm25 = Bm25Index::from_dataset(&ds)?;
    let bm25_held_out = score_fidelity(&held, &table, cfg.reward.eps_u, |qid, docs| {
        bm25.score_docs(&ds.query_tokens(ds.query(qid).expect("validated above")), docs)
    });

    scorer.save(&cfg.paths.artifact(REWARD_MODEL))?;
    let mut trace = String::from("epoch,mean_hinge\n");
    for (e, l) in training.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{e},{l}\n"));
    }
    jsonl::write_atomic(&cfg.paths.artifact(REWARD_TRACE), trace.as_bytes())?;
    jsonl::write_records(&cfg.paths.artifact(REWARDS), &score_pools(&scorer, &ds))?;
    let report = RewardStageReport {
        quadruplets: quads.quadruplets.len(),
        skipped_queries: quads.skipped_queries,
        final_loss: training.loss_trace.last().copied().unwrap_or(f64::NAN),
        held_out,
        bm25_held_out,
    };
    jsonl::write_json(&cfg.paths.artifact(REWARD_VALIDATION), &report)?;
    info!(
        "train-reward: {} quadruplets; held-out NDCG@1 {:.4} pairwise {:.4} (BM25 {:.4} / {:.4})",
        report.quadruplets,
        report.held_out.ndcg_at_1,
        report.held_out.pairwise_acc,
        report.bm25_held_out.ndcg_at_1,
        report.bm25_held_out.pairwise_acc
    );
    Ok(report)
}

pub fn run_mine(cfg: &PipelineConfig) -> Result<MiningReport> {
    let (ds, manifest) = open(cfg)?;
    let scorer = RewardScorer::load(&cfg.paths.artifact(REWARD_MODEL))?;
    let bm25 = Bm25Index::from_dataset(&ds)?;
    let (records, report) = mine_all(&ds, &manifest.train_ids(), &scorer, &bm25, &cfg.miner)?;
    jsonl::write_records(&cfg.paths.artifact(NEGATIVES), &records)?;
    jsonl::write_json(&cfg.paths.artifact(MINING_REPORT), &report)?;
    info!(
        "mine: {} queries, {} gated negatives, {} backfilled queries",
        report.queries, report.gated_negatives, report.backfilled_queries
    );
    Ok(report)
}

/// Candidate sets `[gold, negatives...]` with reward-derived targets.
pub fn distill_examples(
    ds: &Dataset,
    train_ids: &[&str],
    negatives: &[NegativesRecord],
    scorer: &RewardScorer,
    lambda: f64,
    standardize: bool,
) -> Result<Vec<DistillExample>> {
    let negs: BTreeMap<&str, &NegativesRecord> = negatives.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let position = |id: &str| {
        ds.doc_position(id).ok_or_else(|| UaeError::DanglingReference {
            context: "negatives".into(),
            doc_id: id.to_string(),
        })
    };
    let mut out = Vec::with_capacity(train_ids.len());
    for qid in train_ids {
        let q = ds
            .query(qid)
            .ok_or_else(|| UaeError::Ingest(format!("unknown query_id {qid:?}")))?;
        let rec = negs
            .get(qid)
            .filter(|r| !r.negative_doc_ids.is_empty())
            .ok_or_else(|| UaeError::Ingest(format!("no mined negatives for training query {qid:?}; re-run mine")))?;
        let mut candidates = vec![position(&q.gold_doc_ids[0])?];
        for d in &rec.negative_doc_ids {
            candidates.push(position(d)?);
        }
        let query = ds.query_tokens(q);
        let docs: Vec<&[TokenId]> = candidates.iter().map(|&i| ds.corpus[i].tokens.as_slice()).collect();
        let rewards = scorer.score_many(&query, &docs);
        let target = target_distribution(&rewards, lambda, standardize)?;
        out.push(DistillExample {
            query,
            candidates,
            target,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverStageReport {
    pub examples: usize,
    pub uae_final_loss: f64,
    pub uae_final_kl: f64,
    pub infonce_final_loss: f64,
}

pub fn run_train_retriever(cfg: &PipelineConfig) -> Result<RetrieverStageReport> {
    let (ds, manifest) = open(cfg)?;
    let scorer = RewardScorer::load(&cfg.paths.artifact(REWARD_MODEL))?;
    let negatives: Vec<NegativesRecord> = jsonl::read_records(&cfg.paths.artifact(NEGATIVES))?;
    let train_ids = manifest.train_ids();
    let examples = distill_examples(
        &ds,
        &train_ids,
        &negatives,
        &scorer,
        cfg.distill.lambda,
        cfg.distill.standardize_rewards,
    )?;
    let docs: Vec<&[TokenId]> = ds.corpus.iter().map(|d| d.tokens.as_slice()).collect();
    let vocab = ds.tokenizer.len();
    let uae = train_distill(&examples, &docs, vocab, &cfg.distill)?;

    let contrastive: Vec<ContrastiveQuery> = examples
        .iter()
        .zip(&train_ids)
        .map(|(ex, qid)| {
            let q = ds.query(qid).expect("resolved above");
            ContrastiveQuery {
                query: ex.query.clone(),
                gold: ex.candidates[0],
                excluded: q.gold_doc_ids.iter().filter_map(|g| ds.doc_position(g)).collect(),
            }
        })
        .collect();
    let infonce = train_infonce(&contrastive, &docs, vocab, cfg.baseline.num_negatives, &cfg.distill)?;

    uae.encoder.save(&cfg.paths.artifact(ENCODER), Some(&ds.tokenizer))?;
    jsonl::write_atomic(&cfg.paths.artifact(ENCODER_TRACE), trace_csv(&uae.trace).as_bytes())?;
    infonce
        .encoder
        .save(&cfg.paths.artifact(BASELINE_ENCODER), Some(&ds.tokenizer))?;
    jsonl::write_atomic(&cfg.paths.artifact(BASELINE_TRACE), trace_csv(&infonce.trace).as_bytes())?;
    let last = uae.trace.last().copied();
    let report = RetrieverStageReport {
        examples: examples.len(),
        uae_final_loss: last.map_or(f64::NAN, |t| t.mean_loss),
        uae_final_kl: last.map_or(f64::NAN, |t| t.mean_kl),
        infonce_final_loss: infonce.trace.last().map_or(f64::NAN, |t| t.mean_loss),
    };
    info!(
        "train-retriever: {} examples, UAE loss {:.4} (KL {:.4}), InfoNCE loss {:.4}",
        report.examples, report.uae_final_loss, report.uae_final_kl, report.infonce_final_loss
    );
    Ok(report)
}

fn corpus_embeddings(enc: &BiEncoder, ds: &Dataset) -> Result<Vec<(String, Vec<f64>)>> {
    ds.corpus
        .iter()
        .map(|d| Ok((d.doc_id.clone(), enc.encode(&d.tokens)?)))
        .collect()
}

pub fn run_build_index(cfg: &PipelineConfig) -> Result<usize> {
    let (ds, _) = open(cfg)?;
    let (enc, _) = BiEncoder::load(&cfg.paths.artifact(ENCODER))?;
    let index = VectorIndex::build_hnsw(corpus_embeddings(&enc, &ds)?, cfg.index)?;
    index.save(&cfg.paths.artifact(INDEX))?;
    info!("build-index: {} vectors of dim {}", index.len(), index.dim());
    Ok(index.len())
}

/// The serving path: encoder checkpoint (with its tokenizer) plus the index.
/// Nothing else is loaded.
#[derive(Debug, Clone)]
pub struct DenseRetriever {
    pub encoder: BiEncoder,
    pub tokenizer: Tokenizer,
    pub index: VectorIndex,
}

impl DenseRetriever {
    pub fn load(encoder_path: &Path, index_path: &Path) -> Result<Self> {
        let (encoder, tokenizer) = BiEncoder::load(encoder_path)?;
        let tokenizer = tokenizer.ok_or_else(|| UaeError::Checkpoint("encoder checkpoint carries no tokenizer".into()))?;
        let index = VectorIndex::load(index_path)?;
        if index.dim() != encoder.dim() {
            return Err(UaeError::Index(format!(
                "index dim {} does not match encoder dim {}",
                index.dim(),
                encoder.dim()
            )));
        }
        Ok(DenseRetriever {
            encoder,
            tokenizer,
            index,
        })
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        Self::load(&cfg.paths.artifact(ENCODER), &cfg.paths.artifact(INDEX))
    }

    pub fn retrieve_tokens(&self, tokens: &[TokenId], k: usize) -> Result<Vec<(String, f64)>> {
        let q = self.encoder.encode(tokens)?;
        self.index.search(&q, k)
    }

    pub fn retrieve(&self, question: &str, k: usize) -> Result<Vec<(String, f64)>> {
        self.retrieve_tokens(&self.tokenizer.tokenize(question), k)
    }
}

/// Served-path rankings of depth `eval.retrieve_k` for the held-out queries.
pub fn run_retrieve(cfg: &PipelineConfig) -> Result<RunRanking> {
    let (ds, manifest) = open(cfg)?;
    let r = DenseRetriever::from_config(cfg)?;
    let mut run = RunRanking::new();
    for qid in manifest.held_out_ids() {
        let q = ds.query(qid).expect("manifest matches dataset");
        let hits = r.retrieve(&q.question, cfg.eval.retrieve_k)?;
        run.insert(qid.to_string(), hits.into_iter().map(|(d, _)| d).collect());
    }
    write_run(&cfg.paths.artifact(RUN), &run)?;
    info!("retrieve: {} queries", run.len());
    Ok(run)
}

/// Sorts pool documents by descending score, ties by ascending doc_id.
pub fn rank_by_scores(doc_ids: &[String], scores: &[f64]) -> Vec<String> {
    let mut idx: Vec<usize> = (0..doc_ids.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| doc_ids[a].cmp(&doc_ids[b])));
    idx.into_iter().map(|i| doc_ids[i].clone()).collect()
}

/// Everything `evaluate` and `bench` need, loaded once.
struct EvalContext {
    ds: Dataset,
    manifest: Manifest,
    utilities: UtilityTable,
    lm: NgramLm,
    scorer: RewardScorer,
    bm25: Bm25Index,
    uae: BiEncoder,
    infonce: BiEncoder,
    dense: DenseRetriever,
}

impl EvalContext {
    fn load(cfg: &PipelineConfig) -> Result<Self> {
        let (ds, manifest) = open(cfg)?;
        let utilities = utility_table(&read_utilities(cfg)?);
        let lm = NgramLm::load(&cfg.paths.artifact(ORACLE))?;
        let scorer = RewardScorer::load(&cfg.paths.artifact(REWARD_MODEL))?;
        let bm25 = Bm25Index::from_dataset(&ds)?;
        let (infonce, _) = BiEncoder::load(&cfg.paths.artifact(BASELINE_ENCODER))?;
        let dense = DenseRetriever::from_config(cfg)?;
        Ok(EvalContext {
            ds,
            manifest,
            utilities,
            lm,
            scorer,
            bm25,
            uae: dense.encoder.clone(),
            infonce,
            dense,
        })
    }

    fn pool_tokens(&self, qid: &str) -> (Vec<String>, Vec<&[TokenId]>) {
        let pool = self.ds.pool(qid).expect("held-out queries have pools");
        let toks = pool
            .doc_ids
            .iter()
            .map(|d| self.ds.doc(d).expect("validated pool").tokens.as_slice())
            .collect();
        (pool.doc_ids.clone(), toks)
    }

    fn query_tokens(&self, qid: &str) -> Vec<TokenId> {
        self.ds.query_tokens(self.ds.query(qid).expect("validated query"))
    }

    /// The latency benchmark's query set: the first `n` queries with pools.
    fn bench_queries(&self, n: usize) -> Vec<String> {
        self.ds
            .queries
            .iter()
            .filter(|q| self.ds.pool(&q.query_id).is_some())
            .take(n)
            .map(|q| q.query_id.clone())
            .collect()
    }

    /// Index path: tokenize, encode and search. Rerank path: tokenize, score
    /// every pool document with the reward model and sort.
    fn serving_latency(&self, cfg: &PipelineConfig) -> Result<LatencyReport> {
        let qids = self.bench_queries(cfg.eval.latency_queries);
        let questions: Vec<&str> = qids
            .iter()
            .map(|q| self.ds.query(q).expect("validated").question.as_str())
            .collect();
        let pools: Vec<(Vec<String>, Vec<&[TokenId]>)> = qids.iter().map(|q| self.pool_tokens(q)).collect();
        let k = cfg.eval.retrieve_k;
        latency_bench(
            qids.len(),
            cfg.eval.latency_reps,
            cfg.eval.latency_warmup,
            |i| {
                let hits = self.dense.retrieve(questions[i], k).expect("validated index");
                std::hint::black_box(hits);
            },
            |i| {
                let q = self.ds.tokenizer.tokenize(questions[i]);
                let scores = self.scorer.score_many(&q, &pools[i].1);
                std::hint::black_box(rank_by_scores(&pools[i].0, &scores));
            },
        )
    }
}

pub fn run_bench(cfg: &PipelineConfig) -> Result<LatencyReport> {
    let ctx = EvalContext::load(cfg)?;
    let report = ctx.serving_latency(cfg)?;
    jsonl::write_json(&cfg.paths.artifact(LATENCY), &report)?;
    info!(
        "bench: index median {:.4} ms, rerank median {:.4} ms, speedup {:.1}x",
        report.index_path.median_ms, report.rerank_path.median_ms, report.speedup
    );
    Ok(report)
}

pub const METHOD_BM25: &str = "bm25";
pub const METHOD_INFONCE: &str = "infonce";
pub const METHOD_UAE: &str = "uae";
pub const METHOD_UAE_ANN: &str = "uae_ann";
pub const METHOD_REWARD: &str = "reward_rerank";

pub fn run_evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    let ctx = EvalContext::load(cfg)?;
    let held = ctx.manifest.held_out_ids();
    if held.is_empty() {
        return Err(UaeError::Eval("no held-out queries to evaluate".into()));
    }
    let doc_vecs = |enc: &BiEncoder| -> Result<BTreeMap<String, Vec<f64>>> {
        let mut m = BTreeMap::new();
        for qid in &held {
            for d in &ctx.ds.pool(qid).expect("held-out pools").doc_ids {
                if !m.contains_key(d) {
                    m.insert(d.clone(), enc.encode(&ctx.ds.doc(d).expect("validated").tokens)?);
                }
            }
        }
        Ok(m)
    };
    let uae_docs = doc_vecs(&ctx.uae)?;
    let infonce_docs = doc_vecs(&ctx.infonce)?;

    // Per-method pool scores; the served path reuses the UAE scores for
    // pairwise accuracy since it shares the encoder.
    let mut pool_scores: BTreeMap<&str, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for qid in &held {
        let q = ctx.query_tokens(qid);
        let (ids, toks) = ctx.pool_tokens(qid);
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let cos = |enc: &BiEncoder, vecs: &BTreeMap<String, Vec<f64>>| -> Result<Vec<f64>> {
            let qv = enc.encode(&q)?;
            Ok(ids.iter().map(|d| dot(&qv, &vecs[d])).collect())
        };
        let entries = [
            (METHOD_BM25, ctx.bm25.score_docs(&q, &id_refs)),
            (METHOD_REWARD, ctx.scorer.score_many(&q, &toks)),
            (METHOD_UAE, cos(&ctx.uae, &uae_docs)?),
            (METHOD_INFONCE, cos(&ctx.infonce, &infonce_docs)?),
        ];
        for (m, s) in entries {
            pool_scores.entry(m).or_default().insert(qid.to_string(), s);
        }
    }

    let mut runs: BTreeMap<&str, RunRanking> = BTreeMap::new();
    for (m, per_query) in &pool_scores {
        let run = per_query
            .iter()
            .map(|(qid, s)| (qid.clone(), rank_by_scores(&ctx.ds.pool(qid).expect("pool").doc_ids, s)))
            .collect();
        runs.insert(m, run);
    }
    let mut ann = RunRanking::new();
    for qid in &held {
        let hits = ctx.dense.retrieve_tokens(&ctx.query_tokens(qid), cfg.eval.retrieve_k)?;
        ann.insert(qid.to_string(), hits.into_iter().map(|(d, _)| d).collect());
    }
    runs.insert(METHOD_UAE_ANN, ann);

    // Oracle utilities restricted to held-out queries, extended on demand with
    // rank-1 documents that fall outside the pool.
    let mut utilities: UtilityTable = held
        .iter()
        .filter_map(|q| ctx.utilities.get(*q).map(|u| (q.to_string(), u.clone())))
        .collect();
    for run in runs.values() {
        for (qid, ranked) in run {
            let Some(top) = ranked.first() else { continue };
            let known = utilities.get(qid).is_some_and(|u| u.contains_key(top));
            if !known {
                let q = ctx.ds.query(qid).expect("validated");
                let u = expected_utility(
                    &ctx.lm,
                    &ctx.ds.query_tokens(q),
                    &ctx.ds.doc(top).expect("indexed doc").tokens,
                    &ctx.ds.answer_tokens(q),
                )?;
                utilities.entry(qid.clone()).or_default().insert(top.clone(), u);
            }
        }
    }

    let mut judgments = Judgments::new(cfg.eval.threshold, cfg.eval.relevance)?;
    for qid in &held {
        judgments = judgments.with_gold(qid, ctx.ds.query(qid).expect("validated").gold_doc_ids.iter());
    }
    judgments.set_utilities(&utilities);

    let mut report = EvalReport {
        queries: held.len(),
        relevance: serde_json::to_value(cfg.eval.relevance)?.as_str().unwrap_or_default().to_owned(),
        threshold: cfg.eval.threshold,
        ..Default::default()
    };
    for (m, run) in &runs {
        let mut mm = MethodMetrics::default();
        for &k in &cfg.eval.ks {
            mm.recall.insert(k.to_string(), recall_at_k(run, &judgments, k)?);
        }
        mm.map = mean_average_precision(run, &judgments);
        mm.ndcg_at_1 = ndcg_at_1(run, &utilities);
        mm.exp_util_at_1 = exp_util_at_1(run, &utilities, |_, _| Err(UaeError::Eval("utility precomputed".into())));
        let scores_key = if *m == METHOD_UAE_ANN { METHOD_UAE } else { m };
        let (mut c, mut t) = (0usize, 0usize);
        for qid in &held {
            let Some(utils) = ctx.utilities.get(*qid) else { continue };
            let pool = &ctx.ds.pool(qid).expect("pool").doc_ids;
            let u: Vec<f64> = pool.iter().map(|d| utils.get(d).copied().unwrap_or(0.0)).collect();
            let (ci, ti) = pairwise_counts(&pool_scores[scores_key][*qid], &u, cfg.reward.eps_u);
            c += ci;
            t += ti;
        }
        mm.pairwise_acc = if t == 0 { 0.0 } else { c as f64 / t as f64 };
        let gen = generation_eval(run, &ctx.lm, &ctx.ds, &held, cfg.eval.max_answer_len)?;
        mm.gen_f1 = gen.gen_f1;
        mm.rouge_l = gen.rouge_l;
        mm.generation_flagged = gen.flagged;
        report.methods.insert(m.to_string(), mm);
        write_run(&cfg.paths.artifact(&format!("run_{m}.jsonl")), run)?;
    }
    report.reward_fidelity = Some(validate_reward(
        &ctx.scorer,
        &ctx.ds,
        &held,
        &ctx.utilities,
        cfg.reward.eps_u,
    )?);

    report.latency = method_latency(&ctx, cfg, &uae_docs, &infonce_docs)?;
    let serving = ctx.serving_latency(cfg)?;
    report.latency.insert(METHOD_UAE_ANN.into(), serving.index_path);
    report.latency.insert(METHOD_REWARD.into(), serving.rerank_path);
    report.speedup = Some(serving.speedup);

    report.write(&cfg.paths.artifacts_dir, &cfg.eval.ks)?;
    for (m, mm) in &report.methods {
        info!(
            "evaluate: {m:<14} R@1 {:.4} MAP {:.4} ExpUtil@1 {:.4} Gen-F1 {:.4}",
            mm.recall.get("1").map_or(f64::NAN, |r| r.value),
            mm.map.value,
            mm.exp_util_at_1.value,
            mm.gen_f1
        );
    }
    Ok(report)
}

/// Per-query latency of the pool re-ranking methods that are not part of the
/// serving comparison. Bi-encoder document vectors are precomputed, as they
/// would be offline.
fn method_latency(
    ctx: &EvalContext,
    cfg: &PipelineConfig,
    uae_docs: &BTreeMap<String, Vec<f64>>,
    infonce_docs: &BTreeMap<String, Vec<f64>>,
) -> Result<BTreeMap<String, crate::eval::LatencyStats>> {
    let held = ctx.manifest.held_out_ids();
    let n = held.len().min(cfg.eval.latency_queries);
    let (reps, warm) = (cfg.eval.latency_reps, cfg.eval.latency_warmup);
    let questions: Vec<&str> = held[..n]
        .iter()
        .map(|q| ctx.ds.query(q).expect("validated").question.as_str())
        .collect();
    let pools: Vec<&Vec<String>> = held[..n].iter().map(|q| &ctx.ds.pool(q).expect("pool").doc_ids).collect();
    let mut out = BTreeMap::new();
    out.insert(
        METHOD_BM25.to_string(),
        time_path(n, reps, warm, |i| {
            let q = ctx.ds.tokenizer.tokenize(questions[i]);
            let ids: Vec<&str> = pools[i].iter().map(String::as_str).collect();
            let s = ctx.bm25.score_docs(&q, &ids);
            std::hint::black_box(rank_by_scores(pools[i], &s));
        })?,
    );
    for (m, enc, vecs) in [(METHOD_UAE, &ctx.uae, uae_docs), (METHOD_INFONCE, &ctx.infonce, infonce_docs)] {
        out.insert(
            m.to_string(),
            time_path(n, reps, warm, |i| {
                let q = ctx.ds.tokenizer.tokenize(questions[i]);
                let Ok(qv) = enc.encode(&q) else { return };
                let s: Vec<f64> = pools[i].iter().map(|d| dot(&qv, &vecs[d])).collect();
                std::hint::black_box(rank_by_scores(pools[i], &s));
            })?,
        );
    }
    Ok(out)
}

/// Runs every stage from `synth` through `evaluate`.
pub fn run_all(cfg: &PipelineConfig) -> Result<EvalReport> {
    run_synth(cfg)?;
    run_ingest(cfg)?;
    run_score_utility(cfg)?;
    run_train_reward(cfg)?;
    run_mine(cfg)?;
    run_train_retriever(cfg)?;
    run_build_index(cfg)?;
    run_retrieve(cfg)?;
    run_evaluate(cfg)
}
