//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedRecord {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },

    #[error("dimension mismatch: expected {expected}, got {got}{}", context_suffix(.context))]
    DimMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("empty poem")]
    EmptyPoem,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no token reaches min_freq {min_freq}")]
    NoVocabulary { min_freq: usize },

    #[error("token id {id} out of range (vocabulary size {size})")]
    BadTokenId { id: u32, size: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("corpus of {corpus} poems is smaller than k = {k}")]
    CorpusTooSmall { corpus: usize, k: usize },

    #[error("each pair needs at least one negative on each side")]
    NoNegatives,

    #[error("unknown id {id:?} referenced by {referrer}")]
    UnknownId { id: String, referrer: &'static str },

    #[error("rollout is stale: stored log-prob differs from the model's by {delta:.3e} (tolerance {tol:.1e})")]
    StaleRollout { delta: f64, tol: f64 },

    #[error("no reward signal: both discriminators are disabled (use pretraining instead)")]
    NoRewardSignal,

    #[error("non-finite parameter detected in {0}; aborting")]
    Divergence(&'static str),

    #[error("min of column {column:?} is zero; normalization (a - min)/min is undefined")]
    MinZero { column: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    pub fn dim(expected: usize, got: usize, context: &'static str) -> Self {
        Error::DimMismatch {
            expected,
            got,
            context,
        }
    }

    /// Wrap an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
