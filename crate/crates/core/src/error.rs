use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so the CLI can map them onto exit codes: input and
/// configuration problems are validation failures, everything else is a
/// runtime failure.
#[derive(Debug, Error)]
pub enum UaeError {
    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },

    #[error("referential-integrity error: {context} references unknown doc_id {doc_id:?}")]
    DanglingReference { context: String, doc_id: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("pool for query {query_id:?} has {actual} doc ids, expected {expected}")]
    PoolSize {
        query_id: String,
        expected: usize,
        actual: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),

    #[error("empty answer")]
    EmptyAnswer,

    #[error("encode error: {0}")]
    Encode(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl UaeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UaeError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// a failure while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            UaeError::Ingest(_)
                | UaeError::MalformedLine { .. }
                | UaeError::DanglingReference { .. }
                | UaeError::DuplicateId(_)
                | UaeError::PoolSize { .. }
                | UaeError::Config(_)
                | UaeError::MissingInput(_)
                | UaeError::EmptyAnswer
                | UaeError::VersionMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, UaeError>;
