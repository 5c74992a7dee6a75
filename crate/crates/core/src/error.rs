use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),
    #[error("empty corpus requested")]
    EmptyCorpus,
    #[error("count overflow for category `{category}`: {count} >= N_m={max}")]
    CountOverflow {
        category: String,
        count: usize,
        max: usize,
    },
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("record `{id}`: feature width {found} does not match d={expected}")]
    Dimension {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in encoder layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("invalid temperature {0}; must be > 0")]
    Temperature(f64),
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(usize),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
