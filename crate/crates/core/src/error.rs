use thiserror::Error;

use crate::runtime::Transcript;

pub type Result<T, E = CardError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CardError {
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("no external embedder adapter is registered")]
    ExternalEmbedderUnavailable,

    #[error("external embedder failed: {0}")]
    ExternalEmbedder(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("threshold {0} is outside the open interval (0, 1)")]
    InvalidThreshold(f64),

    #[error("edge set contains a cycle")]
    CycleDetected,

    #[error("index {index} out of range for {n} agents")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("agent {agent} failed in round {round}: {message}")]
    ExecutorFailure { agent: usize, round: usize, message: String, partial: Box<Transcript> },

    #[error("no responses to aggregate")]
    EmptyResponses,

    #[error("agent `{agent}` has no `{feature}` condition feature")]
    MissingPriceFeature { agent: String, feature: String },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("degenerate variance: one side of the correlation is constant")]
    DegenerateVariance,

    #[error("{origin}:{line}:{column}: {message}")]
    Parse { origin: String, line: usize, column: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CardError {
    pub(crate) fn parse(origin: &str, line: usize, column: usize, message: impl Into<String>) -> Self {
        CardError::Parse { origin: origin.to_string(), line, column, message: message.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CardError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code used by the CLI: 2 parse/IO, 3 validation, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CardError::Parse { .. } | CardError::Io { .. } => 2,
            CardError::NonFiniteGradient(_) => 4,
            _ => 3,
        }
    }
}
