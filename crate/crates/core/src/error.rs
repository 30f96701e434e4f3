use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot resolve {name:?} at line {line}")]
    Resolution { line: usize, name: String },
    #[error("non-finite value at step {step}")]
    NonFinite { step: u64 },
    #[error("non-finite output from {0}")]
    NonFiniteOp(&'static str),
    #[error("sequence of length {len} exceeds max_len {max}")]
    Overlength { len: usize, max: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
