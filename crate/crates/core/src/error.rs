use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("word error rate is undefined for an empty reference with a non-empty hypothesis")]
    UndefinedWer,

    #[error("evaluation set is empty")]
    EmptySet,

    #[error("no hypotheses to combine")]
    EmptyInput,

    #[error("n-best score at position {index} is not strictly positive: {score}")]
    InvalidScore { index: usize, score: f64 },

    #[error("arity mismatch: expected {expected}, got {got}")]
    InvalidArity { expected: usize, got: usize },

    #[error("shape error at node {node}: {msg}")]
    Shape { node: usize, msg: String },

    #[error("token {0:?} is not in the vocabulary")]
    Vocab(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("clustering error: {0}")]
    Cluster(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing features for utterance {utt_id}: {msg}")]
    MissingFeatures { utt_id: String, msg: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("reference transcript of {utt_id} is not readable under the current policy")]
    RefAccessDenied { utt_id: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArity { .. } => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
