use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("position {position} does not follow last stored position {last}")]
    PositionOrder { position: usize, last: usize },

    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("sequence of length {len} exceeds max_positions {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("cache slot holds {len} entries, over capacity {capacity}")]
    CapacityExceeded { len: usize, capacity: usize },

    #[error("budget violation: {0}")]
    Budget(String),

    #[error("dimension {dim} exceeds limit {limit}")]
    DimensionLimit { dim: usize, limit: usize },

    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },

    #[error("model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
