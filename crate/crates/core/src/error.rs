use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("operator {0} is not rewritable into a bypass network")]
    NotRewritable(String),

    #[error("state inference failed for {op}: {reason}")]
    StateInference { op: String, reason: String },

    #[error("no parallelization strategy available")]
    NoStrategy,

    #[error("autodiff unsupported for operator kind {0}")]
    AutodiffUnsupported(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("cache desync: layer {layer} holds {cached} positions, window starts at {start}")]
    CacheDesync {
        layer: usize,
        cached: usize,
        start: usize,
    },

    #[error("backward ordering violation: expected window ending at {expected}, got {got}")]
    OrderingViolation { expected: usize, got: usize },

    #[error("dependency violation: {0}")]
    DependencyViolation(String),

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
