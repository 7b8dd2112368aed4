//! Utility-aligned dense retrieval.
//!
//! A generator oracle scores how useful each candidate document is for
//! answering a query. That signal is distilled into a pairwise-trained reward
//! scorer, and the scorer is then distilled into a shared bi-encoder by
//! matching softmax distributions over mined candidate sets. The encoder feeds
//! an HNSW index for serving, and everything is measured by the evaluation
//! harness.

pub mod binio;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod index;
pub mod jsonl;
pub mod miner;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod retriever;
pub mod reward;
pub mod seed;
pub mod synth;

pub use error::{Result, UaeError};
