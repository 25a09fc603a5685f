use std::io;
use std::path::PathBuf;

use awb_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version (magic {0:?})")]
    VersionMismatch(String),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint digest mismatch: stored {stored:016x}, computed {computed:016x}")]
    DigestMismatch { stored: u64, computed: u64 },
    #[error("malformed checkpoint manifest: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum AwbError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl From<TensorError> for AwbError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::InvalidArgument(m) => AwbError::InvalidArgument(m),
            TensorError::NonFinite(m) => AwbError::Numeric(format!("non-finite value in {m}")),
        }
    }
}

impl AwbError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        AwbError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = AwbError> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::AwbError::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
