use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: duplicate key {key} (first seen on line {first_line})")]
    DuplicateKey {
        path: PathBuf,
        line: usize,
        first_line: usize,
        key: String,
    },

    #[error("{0} is empty")]
    EmptyCorpus(PathBuf),

    #[error("query {query_id}: unresolved ground-truth reference {tool_name}::{api_name}")]
    UnresolvedReference {
        query_id: String,
        tool_name: String,
        api_name: String,
    },

    #[error("query {0}: empty ground truth")]
    EmptyGroundTruth(String),

    #[error("missing specific instruction for queries: {}", .0.join(", "))]
    MissingSpecific(Vec<String>),

    #[error("unknown doc_id {0}")]
    UnknownDoc(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("snapshot format version {found} is not supported (expected {expected})")]
    SnapshotVersion { found: u32, expected: u32 },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("trainer hook failed at iteration {iteration}: {message}")]
    TrainerHook { iteration: usize, message: String },

    #[error("no preference pairs were produced")]
    NoPairs,

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable kind, used by the CLI error line and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DuplicateKey { .. } => "duplicate_key",
            Error::EmptyCorpus(_) => "empty_corpus",
            Error::UnresolvedReference { .. } => "unresolved_reference",
            Error::EmptyGroundTruth(_) => "empty_ground_truth",
            Error::MissingSpecific(_) => "missing_specific",
            Error::UnknownDoc(_) => "unknown_doc",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::SnapshotVersion { .. } => "snapshot_version",
            Error::Backend(_) => "backend",
            Error::Diverged { .. } => "diverged",
            Error::TrainerHook { .. } => "trainer_hook",
            Error::NoPairs => "no_pairs",
            Error::Locked(_) => "locked",
            Error::Config { .. } => "config",
            Error::Json(_) => "json",
        }
    }
}
