use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{what} {value} out of range {range}")]
    OutOfRange { what: &'static str, value: i64, range: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: png: {message}")]
    Png { path: PathBuf, message: String },

    #[error("{path}: json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{0} is not trained")]
    Untrained(&'static str),

    #[error("non-finite loss at {stage} step {step}: {detail}")]
    NonFinite { stage: &'static str, step: usize, detail: String },

    #[error("{0} already exists (pass --force to overwrite)")]
    AlreadyExists(PathBuf),

    #[error("dataset: {0}")]
    Dataset(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json { path: path.into(), source }
    }

    /// Short machine-readable category used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Validation(_) => "validation",
            Self::Dimension(_) => "dimension",
            Self::OutOfRange { .. } => "out_of_range",
            Self::Io { .. } => "io",
            Self::Png { .. } => "png",
            Self::Json { .. } => "json",
            Self::Checkpoint { .. } => "checkpoint",
            Self::Config(_) => "config",
            Self::Untrained(_) => "untrained",
            Self::NonFinite { .. } => "non_finite",
            Self::AlreadyExists(_) => "exists",
            Self::Dataset(_) => "dataset",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
