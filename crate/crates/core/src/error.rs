use thiserror::Error;

#[derive(Debug, Error)]
pub enum HrtfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("ill-conditioned fit at ear {ear}, bin {bin}: {reason}")]
    IllConditionedFit { ear: usize, bin: usize, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("insufficient resolution: {0}")]
    InsufficientResolution(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {component} = {value}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        component: &'static str,
        value: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HrtfError>;

pub(crate) fn invalid(msg: impl Into<String>) -> HrtfError {
    HrtfError::InvalidArgument(msg.into())
}
