use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("TLP index {index} out of range (grid has {len})")]
    TlpIndex { index: usize, len: usize },

    #[error("selection {0} resolves to no TLPs")]
    EmptySelection(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid probability vector: {0}")]
    Probability(String),

    #[error("temperature must be >= 1 (got {0})")]
    Temperature(f64),

    #[error("expected {expected} rewards, got {got}")]
    RewardLength { expected: usize, got: usize },

    #[error("invalid meta configuration: {0}")]
    MetaConfig(String),

    #[error("no dataset for TLP `{0}`")]
    MissingDataset(String),

    #[error("empty {split} split for TLP `{tlp}`")]
    EmptySplit { tlp: String, split: String },

    #[error("unknown mDDS setting `{0}` (expected a, b, c or d)")]
    UnknownSetting(String),

    #[error("zero-shot target `{0}` uses a language seen in training")]
    NotExternal(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
