//! Evaluation harness: retrieval, utility, generation and latency metrics.

pub mod harness;
pub mod metrics;
pub mod text;

pub use harness::*;
pub use metrics::*;
pub use text::{rouge_l, token_f1};
