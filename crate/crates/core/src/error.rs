use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("label mode error: {0}")]
    Mode(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("corrupted pooling indices: offset {offset} lies outside window {window}")]
    CorruptIndices { offset: usize, window: usize },

    #[error("undefined score: {0}")]
    UndefinedScore(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
