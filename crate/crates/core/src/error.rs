use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed bundle {path}: {reason}")]
    Bundle { path: PathBuf, reason: String },

    #[error("malformed run-length encoding: {0}")]
    Rle(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("empty class name")]
    EmptyClassName,

    #[error("no valid proposals")]
    NoValidProposals,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("inconsistent ids: {0}")]
    IdMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
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

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration rather than
    /// a failure while running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_)
        )
    }
}
