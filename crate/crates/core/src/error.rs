use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("vocab too small: max_size {max_size} cannot hold {specials} reserved specials")]
    VocabTooSmall { max_size: usize, specials: usize },

    #[error("id out of range: {id} >= vocabulary size {size}")]
    IdOutOfRange { id: u32, size: usize },

    #[error("sequence too short: {len} tokens cannot hold {spans} span(s) covering {budget} tokens")]
    SequenceTooShort { len: usize, spans: usize, budget: usize },

    #[error("sentinel budget exceeded: {spans} spans but only {available} sentinels")]
    SentinelBudgetExceeded { spans: usize, available: usize },

    #[error("MLM over sentinel at position {0}")]
    MlmOverSentinel(usize),

    #[error("invalid span set: {0}")]
    InvalidSpans(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sequence length {len} exceeds max_len {max_len}")]
    LengthOverflow { len: usize, max_len: usize },

    #[error("negative loss weight: {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },

    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),

    #[error("config error: key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("divergence at step {step}: non-finite loss {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("transition called at step {step}, expected tau = {tau}")]
    WrongTransitionStep { step: u64, tau: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    ConfigHashMismatch { found: String, expected: String },

    #[error("checkpoint has no generator; noisy-context evaluation needs one")]
    MissingGenerator,

    #[error("step misalignment: {0}")]
    StepMisalignment(String),

    #[error("degenerate regression: {0}")]
    DegenerateRegression(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
