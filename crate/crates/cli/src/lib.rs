//! `uae` command line: one subcommand per pipeline stage plus the HTTP
//! retrieval service.

pub mod server;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use uae_core::config::PipelineConfig;
use uae_core::pipeline::{self, DenseRetriever};
use uae_core::UaeError;

pub const ENV_DATA_DIR: &str = "UAE_DATA_DIR";
pub const ENV_PORT: &str = "UAE_PORT";

#[derive(Debug, Parser)]
#[command(name = "uae", version, about = "Utility-aligned dense retrieval pipeline")]
pub struct Cli {
    /// JSON config document; every field is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Global seed; overrides the config file.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus, queries and candidate pools.
    Synth,
    /// Validate the data files, build the tokenizer and split the queries.
    Ingest,
    /// Train the generator oracle and score every pool document.
    ScoreUtility,
    /// Train the reward scorer on utility-ordered pairs.
    TrainReward,
    /// Mine utility-gated hard negatives for the training queries.
    Mine,
    /// Train the distilled bi-encoder and the contrastive baseline.
    TrainRetriever,
    /// Embed the corpus and build the HNSW index.
    BuildIndex,
    /// Retrieve for one question, or write rankings for every held-out query.
    Retrieve {
        #[arg(long)]
        question: Option<String>,
        /// Result count; defaults to the configured retrieval depth.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score every method and write the report files.
    Evaluate,
    /// Measure index-path and rerank-path latency.
    Bench,
    /// Serve POST /retrieve and GET /healthz.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

pub fn hits(results: Vec<(String, f64)>) -> Vec<Hit> {
    results.into_iter().map(|(doc_id, score)| Hit { doc_id, score }).collect()
}

/// Config precedence: built-in defaults, then the file, then environment
/// variables, then flags. Stage seeds are derived last.
pub fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Ok(dir) = std::env::var(ENV_DATA_DIR) {
        cfg.paths.data_dir = dir.into();
    }
    if let Ok(port) = std::env::var(ENV_PORT) {
        cfg.serve.port = port
            .parse()
            .map_err(|_| UaeError::Config(format!("{ENV_PORT}={port:?} is not a port number")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Serve { host, port } = &cli.command {
        if let Some(h) = host {
            cfg.serve.host = h.clone();
        }
        if let Some(p) = port {
            cfg.serve.port = *p;
        }
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth => {
            pipeline::run_synth(&cfg)?;
            println!("wrote {}", cfg.paths.data_dir.display());
        }
        Command::Ingest => print_json(&pipeline::run_ingest(&cfg)?)?,
        Command::ScoreUtility => print_json(&pipeline::run_score_utility(&cfg)?)?,
        Command::TrainReward => print_json(&pipeline::run_train_reward(&cfg)?)?,
        Command::Mine => print_json(&pipeline::run_mine(&cfg)?)?,
        Command::TrainRetriever => print_json(&pipeline::run_train_retriever(&cfg)?)?,
        Command::BuildIndex => {
            let n = pipeline::run_build_index(&cfg)?;
            println!("indexed {n} documents");
        }
        Command::Retrieve { question: Some(q), k } => {
            let retriever = DenseRetriever::from_config(&cfg)?;
            let k = k.unwrap_or(cfg.eval.retrieve_k);
            if k == 0 {
                return Err(UaeError::Config("k must be at least 1".into()).into());
            }
            let results = retriever.retrieve(&q, k).map_err(|e| match e {
                UaeError::Encode(m) => UaeError::Config(format!("question {q:?}: {m}")),
                e => e,
            })?;
            let results = hits(results);
            print_json(&serde_json::json!({ "results": results }))?;
        }
        Command::Retrieve { question: None, .. } => {
            let run = pipeline::run_retrieve(&cfg)?;
            println!("wrote rankings for {} queries", run.len());
        }
        Command::Evaluate => {
            let report = pipeline::run_evaluate(&cfg)?;
            print!("{}", report.csv(&cfg.eval.ks));
        }
        Command::Bench => print_json(&pipeline::run_bench(&cfg)?)?,
        Command::Serve { .. } => {
            let retriever = DenseRetriever::from_config(&cfg)?;
            let addr = format!("{}:{}", cfg.serve.host, cfg.serve.port);
            tokio::runtime::Runtime::new()
                .context("starting the async runtime")?
                .block_on(server::serve(retriever, &addr))?;
        }
    }
    Ok(())
}

/// 1 for bad input or configuration, 2 for failures while doing the work.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<UaeError>()) {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_errors_map_to_1_anywhere_in_the_chain() {
        let e = anyhow::Error::from(UaeError::Config("bad".into())).context("loading");
        assert_eq!(exit_code(&e), 1);
        let e = anyhow::Error::from(UaeError::MissingInput("x.jsonl".into()));
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn other_failures_map_to_2() {
        assert_eq!(exit_code(&anyhow::anyhow!("disk on fire")), 2);
        assert_eq!(exit_code(&UaeError::Encode("degenerate".into()).into()), 2);
    }

    #[test]
    fn seed_flag_overrides_the_default_and_derives_stage_seeds() {
        let cli = Cli::try_parse_from(["uae", "--seed", "9", "synth"]).unwrap();
        let cfg = load_config(&cli).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.synth.seed, cfg.stage_seed("synth"));
    }

    #[test]
    fn serve_flags_override_host_and_port() {
        let cli = Cli::try_parse_from(["uae", "serve", "--host", "0.0.0.0", "--port", "9001"]).unwrap();
        let cfg = load_config(&cli).unwrap();
        assert_eq!((cfg.serve.host.as_str(), cfg.serve.port), ("0.0.0.0", 9001));
    }
}
