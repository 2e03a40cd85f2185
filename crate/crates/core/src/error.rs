use thiserror::Error;

/// Errors surfaced by taped evaluation, SVI, models, and artifact IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at node {node} ({op})")]
    NonFiniteValue { node: usize, op: &'static str },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeError {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tape already consumed by a backward pass")]
    UsedTape,

    #[error("trace/config mismatch: {0}")]
    TraceMismatch(String),

    #[error("svi step {step}: {source}")]
    SviStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    VocabError { token: usize, vocab: usize },

    #[error("empty input sequence")]
    EmptyInput,

    #[error("latent dimension is {got}, expected {expected}")]
    DimensionError { expected: usize, got: usize },

    #[error("missing parameter {0:?} in checkpoint")]
    MissingParam(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
