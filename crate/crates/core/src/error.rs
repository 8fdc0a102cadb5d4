use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: String,
        #[source]
        source: Box<Error>,
    },

    #[error("dataset format: {0}")]
    DatasetFormat(String),

    #[error("checkpoint mismatch at `{field}`: {detail}")]
    Checkpoint { field: String, detail: String },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
