//! Generation scoring, latency measurement and report files.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{MetricValue, RunRanking};
use super::text::{rouge_l, token_f1};
use crate::datamodel::Dataset;
use crate::error::{Result, UaeError};
use crate::jsonl;
use crate::oracle::{greedy_decode, LanguageModel};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub gen_f1: f64,
    pub rouge_l: f64,
    pub evaluated: usize,
    /// Queries whose rank-1 document could not be resolved; they score 0.
    pub flagged: Vec<String>,
}

/// Decodes an answer from each query's rank-1 document and scores it against
/// the reference answers. Every listed query must have a non-empty ranking.
pub fn generation_eval<M: LanguageModel + ?Sized>(
    run: &RunRanking,
    lm: &M,
    dataset: &Dataset,
    query_ids: &[&str],
    max_len: usize,
) -> Result<GenerationScores> {
    if max_len == 0 {
        return Err(UaeError::Config("max answer length must be at least 1".into()));
    }
    for qid in query_ids {
        if run.get(*qid).is_none_or(|r| r.is_empty()) {
            return Err(UaeError::Eval(format!("query {qid:?} has an empty candidate list")));
        }
    }
    let mut out = GenerationScores::default();
    let (mut f1, mut rl) = (0.0, 0.0);
    for qid in query_ids {
        out.evaluated += 1;
        let (Some(q), Some(doc)) = (dataset.query(qid), dataset.doc(&run[*qid][0])) else {
            out.flagged.push(qid.to_string());
            continue;
        };
        let decoded = greedy_decode(lm, &dataset.query_tokens(q), &doc.tokens, max_len);
        let text = dataset.tokenizer.detokenize(&decoded);
        f1 += token_f1(&text, &q.answers);
        rl += rouge_l(&text, &q.answers);
    }
    if out.evaluated > 0 {
        out.gen_f1 = f1 / out.evaluated as f64;
        out.rouge_l = rl / out.evaluated as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub samples: usize,
}

impl LatencyStats {
    pub fn from_samples(mut ms: Vec<f64>) -> Self {
        if ms.is_empty() {
            return LatencyStats::default();
        }
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        };
        // nearest-rank percentile
        let p95 = ms[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        LatencyStats {
            median_ms: median,
            mean_ms: ms.iter().sum::<f64>() / n as f64,
            p95_ms: p95,
            samples: n,
        }
    }
}

/// Times `f` once per query per repetition, after `warmup` untimed passes.
pub fn time_path<F: FnMut(usize)>(queries: usize, reps: usize, warmup: usize, mut f: F) -> Result<LatencyStats> {
    if reps == 0 {
        return Err(UaeError::Config("latency repetitions must be at least 1".into()));
    }
    if queries == 0 {
        return Err(UaeError::Config("latency benchmark needs at least one query".into()));
    }
    for _ in 0..warmup {
        for q in 0..queries {
            f(q);
        }
    }
    let mut samples = Vec::with_capacity(queries * reps);
    for _ in 0..reps {
        for q in 0..queries {
            let t = Instant::now();
            f(q);
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(LatencyStats::from_samples(samples))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub index_path: LatencyStats,
    pub rerank_path: LatencyStats,
    /// Rerank median over index median.
    pub speedup: f64,
}

/// Benchmarks the serving path against the rerank path on the same queries.
/// Each closure handles the query with the given position.
pub fn latency_bench<I, R>(queries: usize, reps: usize, warmup: usize, index_path: I, rerank_path: R) -> Result<LatencyReport>
where
    I: FnMut(usize),
    R: FnMut(usize),
{
    let index = time_path(queries, reps, warmup, index_path)?;
    let rerank = time_path(queries, reps, warmup, rerank_path)?;
    Ok(LatencyReport {
        index_path: index,
        rerank_path: rerank,
        speedup: if index.median_ms > 0.0 {
            rerank.median_ms / index.median_ms
        } else {
            f64::INFINITY
        },
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub recall: BTreeMap<String, MetricValue>,
    pub map: MetricValue,
    pub ndcg_at_1: MetricValue,
    pub exp_util_at_1: MetricValue,
    pub pairwise_acc: f64,
    pub gen_f1: f64,
    pub rouge_l: f64,
    pub generation_flagged: Vec<String>,
}

/// Everything `evaluate` measures. Timing lives in `latency` only, so two runs
/// of the same pipeline differ in nothing else.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub relevance: String,
    pub threshold: f64,
    pub methods: BTreeMap<String, MethodMetrics>,
    pub reward_fidelity: Option<crate::reward::RewardValidation>,
    pub latency: BTreeMap<String, LatencyStats>,
    pub speedup: Option<f64>,
}

impl EvalReport {
    /// A copy with every timing field cleared.
    pub fn without_latency(&self) -> EvalReport {
        EvalReport {
            latency: BTreeMap::new(),
            speedup: None,
            ..self.clone()
        }
    }

    pub fn csv(&self, ks: &[usize]) -> String {
        let mut s = String::from("method");
        for k in ks {
            s.push_str(&format!(",r_at_{k}"));
        }
        s.push_str(",map,ndcg_at_1,exp_util_at_1,pairwise_acc,gen_f1,rouge_l,latency_median_ms,latency_mean_ms,latency_p95_ms\n");
        for (name, m) in &self.methods {
            s.push_str(name);
            for k in ks {
                let v = m.recall.get(&k.to_string()).map_or(f64::NAN, |r| r.value);
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(
                ",{},{},{},{},{},{}",
                m.map.value, m.ndcg_at_1.value, m.exp_util_at_1.value, m.pairwise_acc, m.gen_f1, m.rouge_l
            ));
            match self.latency.get(name) {
                Some(l) => s.push_str(&format!(",{},{},{}\n", l.median_ms, l.mean_ms, l.p95_ms)),
                None => s.push_str(",,,\n"),
            }
        }
        s
    }

    /// `method,metric,value,latency_ms` rows for an accuracy/latency plot.
    pub fn efficiency_csv(&self) -> String {
        let mut s = String::from("method,metric,value,latency_ms\n");
        for (name, m) in &self.methods {
            let Some(l) = self.latency.get(name) else { continue };
            for (metric, v) in [
                ("r_at_1", m.recall.get("1").map(|r| r.value)),
                ("exp_util_at_1", Some(m.exp_util_at_1.value)),
            ] {
                if let Some(v) = v {
                    s.push_str(&format!("{name},{metric},{v},{}\n", l.median_ms));
                }
            }
        }
        s
    }

    pub fn write(&self, dir: &Path, ks: &[usize]) -> Result<()> {
        jsonl::write_json(&dir.join("report.json"), self)?;
        jsonl::write_atomic(&dir.join("report.csv"), self.csv(ks).as_bytes())?;
        jsonl::write_atomic(&dir.join("efficiency_scatter.csv"), self.efficiency_csv().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub query_id: String,
    pub ranked_doc_ids: Vec<String>,
}

pub fn write_run(path: &Path, run: &RunRanking) -> Result<()> {
    let records: Vec<RunRecord> = run
        .iter()
        .map(|(q, r)| RunRecord {
            query_id: q.clone(),
            ranked_doc_ids: r.clone(),
        })
        .collect();
    jsonl::write_records(path, &records)
}

pub fn read_run(path: &Path) -> Result<RunRanking> {
    let records: Vec<RunRecord> = jsonl::read_records(path)?;
    let mut run = RunRanking::new();
    for r in records {
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = r.ranked_doc_ids.iter().find(|d| !seen.insert(d.as_str())) {
            return Err(UaeError::Eval(format!("query {:?} ranks {dup:?} twice", r.query_id)));
        }
        if run.insert(r.query_id.clone(), r.ranked_doc_ids).is_some() {
            return Err(UaeError::DuplicateId(r.query_id));
        }
    }
    Ok(run)
}
