use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample coincides with probe center (distance {distance:e})")]
    DegenerateProjection { distance: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("negative density {0} passed to compositing")]
    NegativeDensity(f64),

    #[error("checkpoint {section}: {message}")]
    Checkpoint { section: String, message: String },

    #[error("dataset {context}: {message}")]
    Dataset { context: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(section: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            section: section.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dataset(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dataset {
            context: context.into(),
            message: message.into(),
        }
    }
}
