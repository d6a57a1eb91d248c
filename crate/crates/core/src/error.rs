use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("context overflow: {len} tokens exceeds the {max}-token budget")]
    ContextOverflow { len: usize, max: usize },

    #[error("token {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },

    #[error("response must contain at least one token")]
    EmptyResponse,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("non-finite value while processing sample {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("enumeration would visit {states} states, above the cap of {cap}; use monte-carlo mode")]
    EnumerationCap { states: f64, cap: f64 },

    #[error("stage diverged at step {step}: loss {loss} (initial {initial})")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("record {0} has no attached log-probabilities")]
    MissingLogprobs(usize),

    #[error("no rollout passes the score threshold")]
    EmptySupport,

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
