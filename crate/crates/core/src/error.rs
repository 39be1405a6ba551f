use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, shape mismatch or precondition violation.
    #[error("configuration error: {0}")]
    Config(String),

    /// A forward or backward pass produced a non-finite value.
    #[error("numeric divergence in {layer}")]
    Divergence { layer: String },

    /// The model routes through accent-dependent parameters and no accent was given.
    #[error("accent label required: {0}")]
    LabelRequired(String),

    /// Optimizer or model used out of order (e.g. stepping without gradients).
    #[error("state error: {0}")]
    State(String),

    /// Malformed checkpoint or corpus file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
