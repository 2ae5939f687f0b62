use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid database: {0}")]
    InvalidDatabase(String),

    #[error("signal {signal}: bit window {first}..={last} exceeds {available} available bits")]
    WindowOutOfRange {
        signal: String,
        first: usize,
        last: usize,
        available: usize,
    },

    #[error("aid 0x{aid:03X} signal {signal}: value {value} outside [{min}, {max}]")]
    RangeViolation {
        aid: u16,
        signal: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("signal {signal}: value {value} not representable in {bits} bits")]
    NotRepresentable { signal: String, value: f64, bits: u8 },

    #[error("unknown aid 0x{0:03X}")]
    UnknownAid(u16),

    #[error("aid 0x{0:03X}: {1}")]
    Stream(u16, String),

    #[error("timestamps decrease at message {index}")]
    Unordered { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
