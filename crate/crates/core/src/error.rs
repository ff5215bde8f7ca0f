use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("row {row} has norm {norm:e}, not above eps")]
    DegenerateVector { row: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("objective evaluated to a non-finite value")]
    NonFiniteObjective,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input row {row} is not l2-normalized (norm {norm})")]
    Normalization { row: usize, norm: f64 },
    #[error("text is empty")]
    EmptyText,
    #[error("caption {0:?} does not contain exactly one known class word")]
    AmbiguousCaption(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("augmentation failed: {0}")]
    Augmentation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("views do not overlap")]
    EmptyOverlap,
    #[error("dataset not found at {0}")]
    DatasetNotFound(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
