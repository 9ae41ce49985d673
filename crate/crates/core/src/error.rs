use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for axis of length {len}")]
    Index { index: usize, len: usize },

    #[error("time {time}s is out of range: temporal table covers [0, {max_seconds}) seconds")]
    TimeRange { time: f64, max_seconds: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate embedding: {0} has zero norm")]
    DegenerateEmbedding(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("gradient for parameter `{0}` was never populated")]
    MissingGradient(String),

    #[error("invalid entry `{clip_id}`: {reason}")]
    Validation { clip_id: String, reason: String },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
