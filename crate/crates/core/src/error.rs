use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: length {len} bytes is not a multiple of 16")]
    BadLength { path: PathBuf, len: u64 },

    #[error("non-finite value at point {point}, channel {channel}")]
    NonFinite { point: usize, channel: usize },

    #[error("expected {expected} channels, got {actual}")]
    ChannelCount { expected: usize, actual: usize },

    #[error("value {value} at point {point} is not representable in single precision")]
    NotSinglePrecision { point: usize, value: f64 },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cell has no valid points")]
    EmptyCell,

    #[error("duplicate cell coordinate {0:?}")]
    DuplicateCoord([usize; 3]),

    #[error("cell coordinate {0:?} outside grid")]
    CoordOutOfRange([usize; 3]),

    #[error("feature map of {0} elements exceeds the allocation limit")]
    MapTooLarge(usize),

    #[error("forward cache missing or inconsistent: {0}")]
    Cache(String),

    #[error("non-finite gradient in group {group} at index {index}")]
    NonFiniteGradient { group: String, index: usize },

    #[error("no tie-free sample found after {0} attempts")]
    TieDetected(usize),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
