use std::path::PathBuf;

/// Errors produced anywhere in the re-enactment stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checksum mismatch in {path}: stored {stored}, computed {computed}")]
    Checksum {
        path: PathBuf,
        stored: String,
        computed: String,
    },

    #[error("malformed container {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step}: {report}")]
    NonFinite { step: u64, report: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
