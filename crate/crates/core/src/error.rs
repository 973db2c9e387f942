use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: bad IDX magic number {found:#010x}")]
    IdxMagic { path: PathBuf, found: u32 },

    #[error("{path}: truncated IDX file (expected {expected} bytes, found {found})")]
    IdxTruncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: IDX dimensions overflow addressable size")]
    IdxOverflow { path: PathBuf },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("every target candidate was rejected at stage {stage} ({reason})")]
    EmptyPool { stage: u8, reason: &'static str },

    #[error("partition {partition} of {k} received no samples")]
    EmptyPartition { partition: usize, k: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
