use std::io;

use thiserror::Error;

/// Errors raised by tensor construction, lowering, packing and the network.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("encoding error: entry at ({row}, {col}) is {value}, expected -1 or +1")]
    Encoding { row: usize, col: usize, value: f32 },

    #[error("network spec error: {0}")]
    Spec(String),

    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("blob format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
