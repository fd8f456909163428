use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CvsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CvsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid configuration in {block}: {detail}")]
    Config { block: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("unknown tap `{name}`; valid taps: {valid}")]
    UnknownTap { name: String, valid: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed dataset record in {path} at byte offset {offset}: {detail}")]
    MalformedRecord { path: PathBuf, offset: u64, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CvsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CvsError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        CvsError::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn config(block: &'static str, detail: impl Into<String>) -> Self {
        CvsError::Config { block, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CvsError::Io { path: path.into(), source }
    }
}
