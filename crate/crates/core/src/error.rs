use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("prefix of length {len} exceeds the model horizon max_len={max_len}")]
    HorizonViolation { len: usize, max_len: usize },

    #[error("support violation: {0}")]
    SupportViolation(String),

    #[error("models are incompatible: {0}")]
    IncompatibleModels(String),

    #[error("batch must contain at least one sequence")]
    EmptyBatch,

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),

    #[error("unknown reward `{0}`")]
    UnknownReward(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
