use thiserror::Error;

/// Errors produced by the matching pipeline and its harness.
#[derive(Debug, Error)]
pub enum CaspError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("weight load error: {0}")]
    Load(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    /// No ground-truth correspondences: the pair carries no supervision and
    /// should be skipped.
    #[error("empty ground-truth set")]
    EmptySupervision,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CaspError> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::CaspError::Dimension(format!($($arg)*))
    };
}

macro_rules! arg_err {
    ($($arg:tt)*) => {
        $crate::error::CaspError::Argument(format!($($arg)*))
    };
}

pub(crate) use arg_err;
pub(crate) use dim_err;
