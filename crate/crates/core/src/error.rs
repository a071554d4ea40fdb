use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no chromosome boundary found: {0}")]
    NoBoundary(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("feature unavailable: {0}")]
    FeatureUnavailable(String),

    #[error("metric {metric} needs at least {needed} labels, got {got}")]
    MetricArity {
        metric: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
