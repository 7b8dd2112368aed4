//! Acceptance suite. Runs every exit criterion, prints one PASS/FAIL line
//! each, and exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use uae_core::config::PipelineConfig;
use uae_core::datamodel::{Dataset, TokenId, NUM_RESERVED};
use uae_core::eval::metrics::{
    mean_average_precision, ndcg_at_1, ndcg_at_1_scores, pairwise_counts, recall_at_k, Judgments, Relevance, RunRanking,
};
use uae_core::eval::text::{rouge_l_tokens, token_f1};
use uae_core::eval::EvalReport;
use uae_core::index::{HnswParams, VectorIndex};
use uae_core::jsonl;
use uae_core::miner::{audit_negatives, mine, Bm25Index, NegativesRecord};
use uae_core::oracle::UtilityTable;
use uae_core::pipeline::{self, Manifest, RewardStageReport, METHOD_INFONCE, METHOD_REWARD, METHOD_UAE, METHOD_UAE_ANN};
use uae_core::retriever::{
    entropy, student_distribution, target_distribution, train_distill, uae_loss, BiEncoder, DistillCfg, DistillExample,
};
use uae_core::reward::{RewardScorer, TrainPair};

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
const FD_CONFIGS: usize = 120;
const FD_BUDGET: Duration = Duration::from_secs(30);
const DIST_VECTORS: usize = 1000;
const METRIC_RANKINGS: usize = 1000;
const METRIC_TOL: f64 = 1e-12;
const KL_STEPS: usize = 300;
const KL_TARGET: f64 = 0.01;
const HNSW_DOCS: usize = 10_000;
const HNSW_DIM: usize = 64;
const HNSW_QUERIES: usize = 100;
const HNSW_MIN_RECALL: f64 = 0.95;
const INDEX_BUDGET: Duration = Duration::from_secs(120);
const REWARD_MIN_NDCG: f64 = 0.85;
const REWARD_MIN_PAIRWISE: f64 = 0.70;
const REWARD_BUDGET: Duration = Duration::from_secs(600);
const UAE_MIN_R1_GAIN: f64 = 0.05;
const UAE_BUDGET: Duration = Duration::from_secs(1800);
const MINING_QUERIES: usize = 100;
const LATENCY_DOCS: usize = 10_000;
const MIN_SPEEDUP: f64 = 10.0;

/// What a criterion reports: whether it holds and the measured values.
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Everything later criteria need from one full pipeline run, captured
/// before its working directory is removed.
struct PipelineRun {
    cfg: PipelineConfig,
    report: EvalReport,
    report_json: Value,
    report_csv: String,
    reward_stage: RewardStageReport,
    manifest: Manifest,
    dataset: Dataset,
    negatives: Vec<NegativesRecord>,
    scorer: RewardScorer,
    elapsed: Duration,
}

fn run_pipeline(seed: u64, num_docs: usize) -> PipelineRun {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    cfg.synth.num_docs = num_docs;
    cfg.paths.data_dir = dir.path().join("data");
    cfg.paths.artifacts_dir = dir.path().join("artifacts");
    let cfg = cfg.resolved();
    cfg.validate().expect("valid config");
    let start = Instant::now();
    let report = pipeline::run_all(&cfg).expect("pipeline runs");
    let elapsed = start.elapsed();
    let art = |name: &str| cfg.paths.artifact(name);
    let report_json: Value = jsonl::read_json(&art("report.json")).expect("report.json");
    let report_csv = std::fs::read_to_string(art("report.csv")).expect("report.csv");
    let reward_stage: RewardStageReport = jsonl::read_json(&art(pipeline::REWARD_VALIDATION)).expect("reward report");
    let (dataset, manifest) = pipeline::open(&cfg).expect("dataset");
    let negatives = jsonl::read_records(&art(pipeline::NEGATIVES)).expect("negatives");
    let scorer = RewardScorer::load(&art(pipeline::REWARD_MODEL)).expect("reward model");
    PipelineRun {
        cfg,
        report,
        report_json,
        report_csv,
        reward_stage,
        manifest,
        dataset,
        negatives,
        scorer,
        elapsed,
    }
}

/// Relative error, with gradients below `1e-4` compared absolutely: at the
/// fixed step the difference quotient of an O(1) loss carries about 1e-11 of
/// rounding noise, which would otherwise dominate exactly-zero entries.
fn rel_err(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4)
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<TokenId> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(NUM_RESERVED as u32..vocab as u32)).collect()
}

fn reward_fd_config(seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.random_range(8..14);
    let dim = rng.random_range(2..5);
    let hidden = rng.random_range(2..6);
    let mut scorer = RewardScorer::new(vocab, dim, hidden, seed).unwrap();
    for p in scorer.params_mut() {
        *p = rng.random_range(-1.0..1.0);
    }
    let n_pairs = rng.random_range(1..4);
    let seqs: Vec<[Vec<TokenId>; 3]> = (0..n_pairs)
        .map(|_| {
            [
                random_tokens(&mut rng, vocab, 4),
                random_tokens(&mut rng, vocab, 4),
                random_tokens(&mut rng, vocab, 4),
            ]
        })
        .collect();
    let pairs: Vec<TrainPair> = seqs
        .iter()
        .map(|s| TrainPair {
            query: &s[0],
            d_i: &s[1],
            d_j: &s[2],
        })
        .collect();
    let margin = rng.random_range(0.5..2.0);
    let wd = if rng.random_bool(0.5) { 0.0 } else { 0.01 };
    // Central differences are meaningless across the hinge kink.
    let near_kink = pairs.iter().any(|p| {
        let gap = margin - (scorer.score(p.query, p.d_i) - scorer.score(p.query, p.d_j));
        gap.abs() < 1e-4
    });
    if near_kink {
        return None;
    }
    let (_, grad) = scorer.objective(&pairs, margin, wd);
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let orig = scorer.params()[i];
        scorer.params_mut()[i] = orig + FD_STEP;
        let up = scorer.objective(&pairs, margin, wd).0;
        scorer.params_mut()[i] = orig - FD_STEP;
        let down = scorer.objective(&pairs, margin, wd).0;
        scorer.params_mut()[i] = orig;
        worst = worst.max(rel_err((up - down) / (2.0 * FD_STEP), grad[i]));
    }
    Some(worst)
}

fn distill_fd_config(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.random_range(10..16);
    let dim = rng.random_range(2..6);
    let mut enc = BiEncoder::new(vocab, dim, seed).unwrap();
    for p in enc.params_mut() {
        *p = rng.random_range(-0.8..0.8);
    }
    let docs: Vec<Vec<TokenId>> = (0..rng.random_range(3..7)).map(|_| random_tokens(&mut rng, vocab, 4)).collect();
    let refs: Vec<&[TokenId]> = docs.iter().map(Vec::as_slice).collect();
    let lambda = rng.random_range(0.5..4.0);
    let standardize = rng.random_bool(0.5);
    let examples: Vec<DistillExample> = (0..rng.random_range(1..4))
        .map(|_| {
            let n = rng.random_range(2..=docs.len().min(4));
            let mut candidates: Vec<usize> = (0..docs.len()).collect();
            candidates.shuffle(&mut rng);
            candidates.truncate(n);
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            DistillExample {
                query: random_tokens(&mut rng, vocab, 3),
                candidates,
                target: target_distribution(&rewards, lambda, standardize).unwrap(),
            }
        })
        .collect();
    let batch: Vec<&DistillExample> = examples.iter().collect();
    let tau = rng.random_range(0.2..1.0);
    let wd = if rng.random_bool(0.5) { 0.0 } else { 0.01 };
    let cross = rng.random_bool(0.5);
    let (_, grad) = enc.objective(&batch, &refs, tau, wd, cross).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let orig = enc.params()[i];
        enc.params_mut()[i] = orig + FD_STEP;
        let up = enc.objective(&batch, &refs, tau, wd, cross).unwrap().0;
        enc.params_mut()[i] = orig - FD_STEP;
        let down = enc.objective(&batch, &refs, tau, wd, cross).unwrap().0;
        enc.params_mut()[i] = orig;
        worst = worst.max(rel_err((up - down) / (2.0 * FD_STEP), grad[i]));
    }
    worst
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let (mut reward_worst, mut reward_n, mut seed) = (0.0f64, 0, 0u64);
    while reward_n < FD_CONFIGS {
        if let Some(e) = reward_fd_config(seed) {
            reward_worst = reward_worst.max(e);
            reward_n += 1;
        }
        seed += 1;
    }
    let distill_worst = (0..FD_CONFIGS as u64).map(distill_fd_config).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    verdict(
        reward_worst < FD_TOL && distill_worst < FD_TOL && elapsed < FD_BUDGET,
        format!(
            "hinge max rel err {reward_worst:.2e}, distillation max rel err {distill_worst:.2e} over {FD_CONFIGS} configs each, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Indices sorted by value descending, ties by ascending index.
fn argsort_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

fn distribution_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut sum_err, mut shift_err, mut uniform_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut order_mismatch = 0;
    for _ in 0..DIST_VECTORS {
        let n = rng.random_range(2..12);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lambda = rng.random_range(0.1..8.0);
        let standardize = rng.random_bool(0.5);
        let target = target_distribution(&rewards, lambda, standardize).unwrap();
        sum_err = sum_err.max((target.iter().sum::<f64>() - 1.0).abs());

        let shift = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let moved = target_distribution(&shifted, lambda, standardize).unwrap();
        shift_err = shift_err.max(target.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let flat = target_distribution(&rewards, 0.0, standardize).unwrap();
        uniform_err = uniform_err.max(flat.iter().map(|p| (p - 1.0 / n as f64).abs()).fold(0.0, f64::max));

        if argsort_desc(&target) != argsort_desc(&rewards) {
            order_mismatch += 1;
        }

        let dim = rng.random_range(2..8);
        let mut unit = || -> Vec<f64> {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        };
        let q = unit();
        let cands: Vec<Vec<f64>> = (0..n).map(|_| unit()).collect();
        let refs: Vec<&[f64]> = cands.iter().map(Vec::as_slice).collect();
        let tau = rng.random_range(0.01..2.0);
        let student = student_distribution(&q, &refs, tau).unwrap();
        sum_err = sum_err.max((student.iter().sum::<f64>() - 1.0).abs());
    }
    verdict(
        sum_err <= 1e-9 && shift_err <= 1e-12 && uniform_err == 0.0 && order_mismatch == 0,
        format!(
            "max |sum-1| {sum_err:.1e}, max shift change {shift_err:.1e}, lambda=0 max deviation {uniform_err:.1e}, \
             order mismatches {order_mismatch}/{DIST_VECTORS}"
        ),
    )
}

fn kl_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut min_gap, mut max_self) = (f64::INFINITY, 0.0f64);
    for _ in 0..DIST_VECTORS {
        let n = rng.random_range(2..10);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = target_distribution(&rewards, rng.random_range(0.0..5.0), true).unwrap();
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let student = target_distribution(&logits, 1.0, false).unwrap();
        min_gap = min_gap.min(uae_loss(&target, &student).unwrap() - entropy(&target));
        max_self = max_self.max((uae_loss(&target, &target).unwrap() - entropy(&target)).abs());
    }

    let docs: Vec<Vec<TokenId>> = vec![vec![5, 6], vec![7, 8, 9], vec![10, 5], vec![11, 12, 6], vec![13]];
    let refs: Vec<&[TokenId]> = docs.iter().map(Vec::as_slice).collect();
    let examples = vec![
        DistillExample {
            query: vec![5, 14],
            candidates: vec![0, 1, 2, 3],
            target: target_distribution(&[2.0, -1.0, 0.5, 0.0], 5.0, true).unwrap(),
        },
        DistillExample {
            query: vec![15, 9],
            candidates: vec![1, 4, 3],
            target: target_distribution(&[1.0, 0.0, -1.0], 5.0, true).unwrap(),
        },
    ];
    // One batch holding every example, so each epoch is a single step.
    let cfg = DistillCfg {
        lr: 1e-2,
        epochs: KL_STEPS,
        batch_size: examples.len(),
        dim: 16,
        weight_decay: 0.0,
        seed: 3,
        ..DistillCfg::default()
    };
    let trained = train_distill(&examples, &refs, 16, &cfg).unwrap();
    let batch: Vec<&DistillExample> = examples.iter().collect();
    let mut grad = vec![0.0; trained.encoder.params().len()];
    let final_kl = trained
        .encoder
        .batch_objective(&batch, &refs, cfg.tau, false, &mut grad)
        .unwrap()
        .kl;
    verdict(
        min_gap >= -1e-12 && max_self <= 1e-12 && final_kl < KL_TARGET,
        format!("min loss-entropy {min_gap:.2e}, max self gap {max_self:.1e}, KL after {KL_STEPS} steps {final_kl:.2e}"),
    )
}

struct RandomQuery {
    ranking: Vec<String>,
    relevant: BTreeSet<String>,
    utilities: Vec<f64>,
    scores: Vec<f64>,
}

fn random_query(rng: &mut ChaCha8Rng) -> RandomQuery {
    let n = rng.random_range(1..16);
    let mut ranking: Vec<String> = (0..n).map(|i| format!("d{i:02}")).collect();
    ranking.shuffle(rng);
    let relevant = (0..n)
        .filter(|_| rng.random_bool(0.25))
        .map(|i| format!("d{i:02}"))
        .collect();
    // Quantized values so that ties occur.
    let utilities = (0..n)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0..8) as f64 / 8.0 })
        .collect();
    let scores = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
    RandomQuery {
        ranking,
        relevant,
        utilities,
        scores,
    }
}

fn oracle_recall(q: &RandomQuery, k: usize) -> f64 {
    let hit = q.ranking.iter().take(k).any(|d| q.relevant.contains(d));
    if hit {
        1.0
    } else {
        0.0
    }
}

fn oracle_ap(q: &RandomQuery) -> Option<f64> {
    if q.relevant.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for r in &q.relevant {
        let Some(pos) = q.ranking.iter().position(|d| d == r) else { continue };
        let above = q.ranking[..=pos].iter().filter(|d| q.relevant.contains(*d)).count();
        total += above as f64 / (pos + 1) as f64;
    }
    Some(total / q.relevant.len() as f64)
}

fn oracle_ndcg1(scores: &[f64], utilities: &[f64]) -> Option<f64> {
    let best = utilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if best <= 0.0 {
        return None;
    }
    let top = argsort_desc(scores)[0];
    Some(utilities[top] / best)
}

fn oracle_pairwise(scores: &[f64], utilities: &[f64], eps: f64) -> (usize, usize) {
    let (mut good, mut all) = (0, 0);
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            let (hi, lo) = if utilities[i] > utilities[j] { (i, j) } else { (j, i) };
            if (utilities[i] - utilities[j]).abs() > eps {
                all += 1;
                good += usize::from(scores[hi] > scores[lo]);
            }
        }
    }
    (good, all)
}

fn metric_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let queries: Vec<RandomQuery> = (0..METRIC_RANKINGS).map(|_| random_query(&mut rng)).collect();
    let mut worst: f64 = 0.0;
    let mut run = RunRanking::new();
    let mut judgments = Judgments::new(0.1, Relevance::Gold).unwrap();
    let mut table = UtilityTable::new();
    let (mut ap_sum, mut ap_n) = (0.0, 0);
    let (mut ndcg_sum, mut ndcg_n) = (0.0, 0);
    let mut recall_sums = [0.0; 3];
    for (i, q) in queries.iter().enumerate() {
        let qid = format!("q{i:04}");
        run.insert(qid.clone(), q.ranking.clone());
        judgments = judgments.with_gold(&qid, q.relevant.iter().cloned());
        // Utilities keyed by the ranking's doc ids.
        let utils: BTreeMap<String, f64> = q.ranking.iter().cloned().zip(q.utilities.iter().copied()).collect();
        table.insert(qid.clone(), utils);

        let single_run = RunRanking::from([(qid.clone(), q.ranking.clone())]);
        let single = Judgments::new(0.1, Relevance::Gold).unwrap().with_gold(&qid, q.relevant.iter().cloned());
        for (slot, k) in [1usize, 3, 10].into_iter().enumerate() {
            let want = oracle_recall(q, k);
            recall_sums[slot] += want;
            worst = worst.max((recall_at_k(&single_run, &single, k).unwrap().value - want).abs());
        }
        if let Some(ap) = oracle_ap(q) {
            ap_sum += ap;
            ap_n += 1;
            worst = worst.max((mean_average_precision(&single_run, &single).value - ap).abs());
        }
        let got = ndcg_at_1_scores(&q.scores, &q.utilities);
        match (got, oracle_ndcg1(&q.scores, &q.utilities)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
        let top_util = q.utilities[0];
        let max_util = q.utilities.iter().cloned().fold(0.0, f64::max);
        if max_util > 0.0 {
            ndcg_sum += top_util / max_util;
            ndcg_n += 1;
        }
        let eps = [0.0, 0.05, 0.2][i % 3];
        if pairwise_counts(&q.scores, &q.utilities, eps) != oracle_pairwise(&q.scores, &q.utilities, eps) {
            worst = f64::INFINITY;
        }
    }
    for (slot, k) in [1usize, 3, 10].into_iter().enumerate() {
        let want = recall_sums[slot] / METRIC_RANKINGS as f64;
        worst = worst.max((recall_at_k(&run, &judgments, k).unwrap().value - want).abs());
    }
    worst = worst.max((mean_average_precision(&run, &judgments).value - ap_sum / ap_n as f64).abs());
    worst = worst.max((ndcg_at_1(&run, &table).value - ndcg_sum / ndcg_n as f64).abs());

    let f1 = token_f1("red apple pie", &["apple pie"]);
    let tokens = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let rl = rouge_l_tokens(&tokens("a b c d"), &tokens("a c d"));
    let text_ok = (f1 - 0.8).abs() <= METRIC_TOL && (rl - 6.0 / 7.0).abs() <= METRIC_TOL && (rl - 0.85714).abs() < 5e-6;
    verdict(
        worst <= METRIC_TOL && text_ok,
        format!("max deviation {worst:.1e} over {METRIC_RANKINGS} rankings; token F1 {f1}, ROUGE-L {rl:.5}"),
    )
}

fn random_unit_items(n: usize, dim: usize, seed: u64, prefix: &str) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (format!("{prefix}{i:05}"), v.into_iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// Top-k by a full scan over the vectors rounded to 32-bit storage, with
/// ascending-id tie-breaking.
fn full_scan(items: &[(String, Vec<f64>)], q: &[f64], k: usize) -> Vec<String> {
    let mut scored: Vec<(f64, &String)> = items
        .iter()
        .map(|(id, v)| (v.iter().zip(q).map(|(a, b)| f64::from(*a as f32) * b).sum(), id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, id)| id.clone()).collect()
}

fn recall_at_10(index: &VectorIndex, queries: &[(String, Vec<f64>)]) -> f64 {
    let mut hits = 0;
    for (_, q) in queries {
        let exact: BTreeSet<String> = index.search_exact(q, 10).unwrap().into_iter().map(|h| h.0).collect();
        hits += index.search(q, 10).unwrap().iter().filter(|h| exact.contains(&h.0)).count();
    }
    hits as f64 / (10 * queries.len()) as f64
}

fn index_correctness() -> Verdict {
    let start = Instant::now();
    let mut exact_mismatch = 0;
    let mut instances = 0;
    for (n, dim, seed) in [(1, 3, 10), (7, 4, 11), (100, 8, 12), (1000, 16, 13), (3000, 32, 14)] {
        let items = random_unit_items(n, dim, seed, "d");
        let index = VectorIndex::build_exact(items.clone()).unwrap();
        for (_, q) in random_unit_items(20, dim, seed + 100, "q") {
            for k in [1, 5, n + 3] {
                instances += 1;
                let got: Vec<String> = index.search_exact(&q, k).unwrap().into_iter().map(|h| h.0).collect();
                if got != full_scan(&items, &q, k) {
                    exact_mismatch += 1;
                }
            }
        }
    }

    let items = random_unit_items(HNSW_DOCS, HNSW_DIM, 20, "d");
    let queries = random_unit_items(HNSW_QUERIES, HNSW_DIM, 21, "q");
    let mut hnsw = VectorIndex::build_hnsw(items, HnswParams::default()).unwrap();
    let recall = recall_at_10(&hnsw, &queries);

    let reloaded = VectorIndex::from_bytes(&hnsw.to_bytes()).unwrap();
    let mut persist_mismatch = 0;
    for (_, q) in &queries {
        if reloaded.search(q, 10).unwrap() != hnsw.search(q, 10).unwrap()
            || reloaded.search_exact(q, 10).unwrap() != hnsw.search_exact(q, 10).unwrap()
        {
            persist_mismatch += 1;
        }
    }
    hnsw.set_ef_search(100);
    let wider = recall_at_10(&hnsw, &queries);
    let elapsed = start.elapsed();
    verdict(
        exact_mismatch == 0 && recall >= HNSW_MIN_RECALL && persist_mismatch == 0 && elapsed < INDEX_BUDGET,
        format!(
            "exact mismatches {exact_mismatch}/{instances}, HNSW recall@10 {recall:.3} (need {HNSW_MIN_RECALL}; \
             ef_search 100 gives {wider:.3}), reload mismatches {persist_mismatch}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn reward_fidelity(run: &PipelineRun) -> Verdict {
    let held = &run.reward_stage.held_out;
    let bm25 = &run.reward_stage.bm25_held_out;
    verdict(
        held.ndcg_at_1 >= REWARD_MIN_NDCG
            && held.pairwise_acc >= REWARD_MIN_PAIRWISE
            && held.ndcg_at_1 > bm25.ndcg_at_1
            && run.elapsed < REWARD_BUDGET,
        format!(
            "held-out NDCG@1 {:.3}, pairwise {:.3} over {} queries; BM25 NDCG@1 {:.3}; {:.1}s",
            held.ndcg_at_1,
            held.pairwise_acc,
            held.queries,
            bm25.ndcg_at_1,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn uae_gain(runs: &[&PipelineRun]) -> Verdict {
    let n = runs.len() as f64;
    let mean = |method: &str, f: &dyn Fn(&uae_core::eval::MethodMetrics) -> f64| -> f64 {
        runs.iter().map(|r| f(&r.report.methods[method])).sum::<f64>() / n
    };
    let r1 = |m: &uae_core::eval::MethodMetrics| m.recall["1"].value;
    let eu = |m: &uae_core::eval::MethodMetrics| m.exp_util_at_1.value;
    let (uae_r1, base_r1) = (mean(METHOD_UAE, &r1), mean(METHOD_INFONCE, &r1));
    let (uae_eu, base_eu) = (mean(METHOD_UAE, &eu), mean(METHOD_INFONCE, &eu));
    let elapsed: Duration = runs.iter().map(|r| r.elapsed).sum();
    verdict(
        uae_r1 - base_r1 >= UAE_MIN_R1_GAIN && uae_eu > base_eu && elapsed < UAE_BUDGET,
        format!(
            "mean over {} seeds: R@1 {uae_r1:.3} vs InfoNCE {base_r1:.3}, ExpUtil@1 {uae_eu:.4} vs {base_eu:.4}; {:.1}s",
            runs.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn mining_gate(run: &PipelineRun) -> Verdict {
    let ds = &run.dataset;
    let bm25 = Bm25Index::from_dataset(ds).unwrap();
    let audit = audit_negatives(ds, &run.negatives, &run.scorer, &bm25, &run.cfg.miner).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<&str> = ds.queries.iter().map(|q| q.query_id.as_str()).collect();
    let sample: Vec<&&str> = ids.choose_multiple(&mut rng, MINING_QUERIES).collect();
    let k = run.cfg.miner.k;
    let m = run.cfg.miner.m;
    let mut violations = 0;
    for qid in &sample {
        let q = ds.query(qid).unwrap();
        let tokens = ds.query_tokens(q);
        let gold: BTreeSet<&str> = q.gold_doc_ids.iter().map(String::as_str).collect();
        let gold_reward = run.scorer.score(&tokens, &ds.doc(&q.gold_doc_ids[0]).unwrap().tokens);
        let reward = |d: &str| run.scorer.score(&tokens, &ds.doc(d).unwrap().tokens);
        let mut deltas: Vec<f64> = vec![-1.0, 0.0];
        for (d, _) in uae_core::miner::bm25_topk(&bm25, &tokens, k, &gold) {
            let gap = gold_reward - reward(&d);
            deltas.extend([gap - 1e-9, gap, gap + 1e-9]);
        }
        deltas.push(f64::MAX);
        deltas.sort_by(f64::total_cmp);
        let mut previous: Option<(BTreeSet<String>, usize)> = None;
        for &delta in &deltas {
            let all: BTreeSet<String> = mine(&bm25, &tokens, &gold, gold_reward, reward, k, delta, k)
                .negatives
                .into_iter()
                .collect();
            let capped = mine(&bm25, &tokens, &gold, gold_reward, reward, k, delta, m).negatives.len();
            if let Some((prev_all, prev_capped)) = &previous {
                if !all.is_subset(prev_all) || capped > *prev_capped {
                    violations += 1;
                }
            }
            previous = Some((all, capped));
        }
    }
    let gold_total: usize = run
        .negatives
        .iter()
        .map(|r| {
            let q = ds.query(&r.query_id).unwrap();
            r.negative_doc_ids.iter().filter(|d| q.gold_doc_ids.contains(d)).count()
        })
        .sum();
    verdict(
        audit.is_clean() && audit.checked > 0 && gold_total == 0 && violations == 0,
        format!(
            "{} gated negatives checked, rank violations {}, gap violations {}, gold negatives {gold_total}, \
             monotonicity violations {violations} over {} queries",
            audit.checked,
            audit.rank_violations,
            audit.gap_violations,
            sample.len()
        ),
    )
}

/// Median latency column for `method` in report.csv.
fn csv_latency(csv: &str, method: &str) -> Option<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let col = header.iter().position(|h| *h == "latency_median_ms")?;
    lines
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|row| row.first() == Some(&method))
        .and_then(|row| row.get(col)?.parse().ok())
}

fn latency(run: &PipelineRun) -> Verdict {
    let index_ms = csv_latency(&run.report_csv, METHOD_UAE_ANN);
    let rerank_ms = csv_latency(&run.report_csv, METHOD_REWARD);
    let docs = run.manifest.docs;
    match (index_ms, rerank_ms) {
        (Some(i), Some(r)) if i > 0.0 => {
            let speedup = r / i;
            verdict(
                speedup >= MIN_SPEEDUP && docs >= LATENCY_DOCS,
                format!("{docs} docs: index path {i:.4} ms, rerank path {r:.4} ms median, speedup {speedup:.1}x"),
            )
        }
        _ => verdict(false, "report.csv lacks a latency for one of the paths".into()),
    }
}

fn strip_latency(mut v: Value) -> Value {
    if let Value::Object(map) = &mut v {
        map.remove("latency");
        map.remove("speedup");
    }
    v
}

fn determinism(a: &PipelineRun, b: &PipelineRun) -> Verdict {
    let same_file = strip_latency(a.report_json.clone()) == strip_latency(b.report_json.clone());
    let same_report = a.report.without_latency() == b.report.without_latency();
    verdict(
        same_file && same_report,
        format!("report.json without latency identical across two runs: {}", same_file && same_report),
    )
}

fn main() {
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Verdict>)> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("distribution invariants", Box::new(distribution_invariants)),
        ("KL correctness", Box::new(kl_correctness)),
        ("metric oracle equivalence", Box::new(metric_equivalence)),
        ("index correctness", Box::new(index_correctness)),
    ];
    let mut failures = 0;
    let mut record = |n: usize, name: &str, v: std::thread::Result<Verdict>| {
        let v = v.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failures += usize::from(!v.pass);
        println!("criterion {n:>2} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        record(i + 1, name, catch_unwind(AssertUnwindSafe(f)));
    }

    let runs = catch_unwind(|| {
        let seeds: Vec<PipelineRun> = (0..3).map(|s| run_pipeline(s, PipelineConfig::default().synth.num_docs)).collect();
        let repeat = run_pipeline(0, PipelineConfig::default().synth.num_docs);
        let large = run_pipeline(0, LATENCY_DOCS);
        (seeds, repeat, large)
    });
    match runs {
        Ok((seeds, repeat, large)) => {
            record(6, "reward fidelity", catch_unwind(AssertUnwindSafe(|| reward_fidelity(&seeds[0]))));
            let all: Vec<&PipelineRun> = seeds.iter().collect();
            record(7, "UAE over InfoNCE", catch_unwind(AssertUnwindSafe(|| uae_gain(&all))));
            record(8, "mining gate audit", catch_unwind(AssertUnwindSafe(|| mining_gate(&seeds[0]))));
            record(9, "latency", catch_unwind(AssertUnwindSafe(|| latency(&large))));
            record(10, "determinism", catch_unwind(AssertUnwindSafe(|| determinism(&seeds[0], &repeat))));
        }
        Err(_) => {
            for (n, name) in [(6, "reward fidelity"), (7, "UAE over InfoNCE"), (8, "mining gate audit"), (9, "latency"), (10, "determinism")] {
                record(n, name, Ok(verdict(false, "pipeline run failed".into())));
            }
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
