use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SogError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SogError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("{path}:{line}: {field}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("incompatible {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

#[allow(unused_macros)]
macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::SogError::InvalidInput(format!($($arg)*))
    };
}
#[allow(unused_imports)]
pub(crate) use invalid;
