use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Problems decoding one of the binary containers (MVOL volumes, TNN checkpoints).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("payload size mismatch: header implies {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated file: {0}")]
    Truncated(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("no transform for patient {0}")]
    MissingTransform(String),
    #[error("sphere center out of grid: {0}")]
    OutOfGrid(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("failed to load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
