use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined measure: {0}")]
    UndefinedMeasure(String),

    #[error("candidate mask is empty")]
    EmptyCandidate,

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("staging error: {0}")]
    Staging(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite loss at step {step}; offending batch indices {batch:?}")]
    NonFiniteLoss { step: usize, batch: Vec<usize> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad numbers rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::NonFiniteLoss { .. })
    }
}
