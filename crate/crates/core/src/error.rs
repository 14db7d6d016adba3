//! Error types shared across the engine.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, guidance processors, the sampler and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that must agree do not.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A single shape is invalid for the requested operation.
    #[error("invalid shape in {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// User-provided input (prompt, file, selector) is unusable.
    #[error("input error: {0}")]
    Input(String),

    /// An internal contract was violated (duplicate capture key, bad step order).
    #[error("logic error: {0}")]
    Logic(String),

    /// An operation produced a NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file had the wrong magic, header or payload length.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn logic(msg: impl Into<String>) -> Self {
        Error::Logic(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
