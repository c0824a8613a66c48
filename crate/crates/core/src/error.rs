use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ReidError>;

#[derive(Debug, Error)]
pub enum ReidError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no records in {0}")]
    NoRecords(PathBuf),

    #[error("duplicate record_id `{0}`")]
    DuplicateRecord(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown encoder `{name}`; known encoders: {known}")]
    UnknownEncoder { name: String, known: String },

    #[error("unknown layer tag `{tag}`; valid tags: {valid}")]
    UnknownLayer { tag: String, valid: String },

    #[error("weights unavailable: {0}")]
    Weights(String),

    #[error("checksum mismatch for {what}: expected {expected}, got {actual}")]
    Checksum {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("zero-shot prompting refused: {0}")]
    JointSpace(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("image decode error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{0} already exists; pass --overwrite to replace it")]
    Exists(PathBuf),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ReidError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ReidError::Io {
            path: path.into(),
            source,
        }
    }
}
