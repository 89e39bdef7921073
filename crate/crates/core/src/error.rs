use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate descriptor at (y={y}, x={x})")]
    DegenerateDescriptor { y: usize, x: usize },

    #[error("point ({x}, {y}) outside grid {width}x{height}")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("instance mask is empty")]
    EmptyMask,

    #[error("keypoint {0} is not mutually visible")]
    NotMutuallyVisible(usize),

    #[error("no schema for category `{0}`")]
    MissingSchema(String),

    #[error("invalid schema for `{category}`: {reason}")]
    InvalidSchema { category: String, reason: String },

    #[error("missing bounding box for keypoint set")]
    MissingBbox,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("undefined sensitivity: no azimuth bin has a positive score")]
    UndefinedSensitivity,

    #[error("need at least {needed} keypoint pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },

    #[error("missing flipped features for `{0}`")]
    MissingFlippedFeatures(String),

    #[error("non-finite loss at step {step} (pair `{pair}`)")]
    NonFiniteLoss { step: usize, pair: String },

    #[error("npy: {0}")]
    Npy(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateDescriptor { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
