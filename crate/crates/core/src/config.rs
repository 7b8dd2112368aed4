//! Pipeline configuration: one JSON document with a section per stage.
//!
//! Every section's own `seed` field is overwritten by [`PipelineConfig::resolved`],
//! which derives it from the global seed, so a single number pins a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UaeError};
use crate::eval::Relevance;
use crate::index::HnswParams;
use crate::jsonl;
use crate::miner::MinerCfg;
use crate::oracle::LmConfig;
use crate::retriever::DistillCfg;
use crate::reward::RewardTrainCfg;
use crate::seed::stream_seed;
use crate::synth::SynthSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsCfg {
    /// Holds corpus.jsonl, queries.jsonl and pools.jsonl.
    pub data_dir: PathBuf,
    /// Holds every derived artifact.
    pub artifacts_dir: PathBuf,
}

impl Default for PathsCfg {
    fn default() -> Self {
        PathsCfg {
            data_dir: "data".into(),
            artifacts_dir: "artifacts".into(),
        }
    }
}

impl PathsCfg {
    pub fn corpus(&self) -> PathBuf {
        self.data_dir.join("corpus.jsonl")
    }
    pub fn queries(&self) -> PathBuf {
        self.data_dir.join("queries.jsonl")
    }
    pub fn pools(&self) -> PathBuf {
        self.data_dir.join("pools.jsonl")
    }
    pub fn artifact(&self, name: &str) -> PathBuf {
        self.artifacts_dir.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleCfg {
    pub lm: LmConfig,
    /// Log-normal noise on utilities; 0 disables it.
    pub noise_sigma: f64,
    pub histogram_bins: usize,
}

impl Default for OracleCfg {
    fn default() -> Self {
        OracleCfg {
            lm: LmConfig::default(),
            noise_sigma: 0.0,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataCfg {
    pub pool_size: usize,
    pub min_freq: usize,
    /// Fraction of queries held out from every training stage.
    pub held_out_fraction: f64,
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg {
            pool_size: crate::datamodel::DEFAULT_POOL_SIZE,
            min_freq: 1,
            held_out_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineCfg {
    /// Random negatives per query for the InfoNCE baseline.
    pub num_negatives: usize,
}

impl Default for BaselineCfg {
    fn default() -> Self {
        BaselineCfg { num_negatives: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCfg {
    pub relevance: Relevance,
    pub threshold: f64,
    pub ks: Vec<usize>,
    pub max_answer_len: usize,
    /// Depth of the served-path ranking over the whole corpus.
    pub retrieve_k: usize,
    pub latency_queries: usize,
    pub latency_reps: usize,
    pub latency_warmup: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            relevance: Relevance::Gold,
            threshold: 0.1,
            ks: vec![1, 3],
            max_answer_len: 8,
            retrieve_k: 50,
            latency_queries: 100,
            latency_reps: 3,
            latency_warmup: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeCfg {
    pub host: String,
    pub port: u16,
}

impl Default for ServeCfg {
    fn default() -> Self {
        ServeCfg {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsCfg,
    pub synth: SynthSpec,
    pub data: DataCfg,
    pub oracle: OracleCfg,
    pub reward: RewardTrainCfg,
    pub miner: MinerCfg,
    pub distill: DistillCfg,
    pub baseline: BaselineCfg,
    pub index: HnswParams,
    pub eval: EvalCfg,
    pub serve: ServeCfg,
}

impl PipelineConfig {
    /// Reads a config document; parse failures are configuration errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = jsonl::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| UaeError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    /// Copy with every stage seed derived from the global one.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.synth.seed = self.stage_seed("synth");
        c.reward.seed = self.stage_seed("reward");
        c.distill.seed = self.stage_seed("distill");
        c.index.seed = self.stage_seed("index");
        c
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        stream_seed(self.seed, &["stage", stage])
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.oracle.lm.validate()?;
        if !(self.oracle.noise_sigma >= 0.0 && self.oracle.noise_sigma.is_finite()) {
            return Err(UaeError::Config("oracle noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.data.held_out_fraction) {
            return Err(UaeError::Config("held_out_fraction must be in [0, 1)".into()));
        }
        if self.data.pool_size < 2 || self.data.min_freq == 0 {
            return Err(UaeError::Config("pool_size must be >= 2 and min_freq >= 1".into()));
        }
        self.reward.validate()?;
        self.miner.validate()?;
        self.distill.validate()?;
        self.index.validate()?;
        if self.baseline.num_negatives == 0 {
            return Err(UaeError::Config("baseline num_negatives must be >= 1".into()));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.threshold) {
            return Err(UaeError::Config(format!("relevance threshold {} outside [0, 1]", e.threshold)));
        }
        if e.ks.is_empty() || e.ks.contains(&0) {
            return Err(UaeError::Config("eval ks must be non-empty and >= 1".into()));
        }
        if e.max_answer_len == 0 || e.retrieve_k == 0 || e.latency_reps == 0 || e.latency_queries == 0 {
            return Err(UaeError::Config(
                "max_answer_len, retrieve_k, latency_reps and latency_queries must be >= 1".into(),
            ));
        }
        Ok(())
    }
}
