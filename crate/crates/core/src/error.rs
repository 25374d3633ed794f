use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("attention over an empty (fully masked) key set")]
    EmptyAttention,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid sample: {0}")]
    Validation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("feature-map cache has no entry for pic id {0}")]
    CacheMiss(u64),

    #[error("stale feature-map cache: built for fixed-CNN checksum {found:#018x}, current is {expected:#018x}")]
    StaleCache { expected: u64, found: u64 },

    #[error("representation table has no entry for pic id {0}")]
    TableMiss(u64),

    #[error("checksum mismatch: expected {expected:#018x}, found {found:#018x}")]
    ChecksumMismatch { expected: u64, found: u64 },

    #[error("variant {0} has no visual path")]
    UnsupportedVariant(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at batch {batch} (epoch {epoch}); parameter norms: {norms}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        norms: String,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
