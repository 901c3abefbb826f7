//! Error type shared across the workspace.

use thiserror::Error;

/// Errors raised by tensor ops, model construction, training, and the
/// experiment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or extents do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument or malformed input data.
    #[error("input error: {0}")]
    Input(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// NaN/Inf encountered, or a quantity (e.g. cosine similarity of a zero
    /// vector) is mathematically undefined.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A component was used before being fitted/loaded.
    #[error("state error: {0}")]
    State(String),

    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact (tensor file, checkpoint, manifest).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
