use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest line {line}: {message}")]
    ManifestLine { line: usize, message: String },

    #[error("sample `{sample_id}` field `{field}`: {message}")]
    InvalidRecord {
        sample_id: String,
        field: String,
        message: String,
    },

    #[error("attention row {row} has every key masked")]
    DegenerateAttention { row: usize },

    #[error("all 29 region boxes are empty")]
    EmptyRegions,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value in `{tensor}` at step {step}")]
    NonFinite { tensor: String, step: usize },

    #[error("checkpoint format version {found} is incompatible with {expected}")]
    IncompatibleCheckpoint { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
