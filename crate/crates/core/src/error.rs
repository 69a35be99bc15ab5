use std::fmt;

use thiserror::Error;

/// Errors raised by the numerical and modelling layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("joint index {index} out of range for {num_joints} joints")]
    IndexOutOfRange { index: usize, num_joints: usize },

    #[error("self-loop on joint {0}")]
    SelfLoop(usize),

    #[error("matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),

    #[error("negative adjacency entry at ({0}, {1})")]
    NegativeEntry(usize, usize),

    #[error("parent map has a cycle through joint {0}")]
    ParentCycle(usize),

    #[error("missing parent entry: {0}")]
    MissingParent(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unsupported Matérn order {0}; expected 0.5, 1.5 or 2.5")]
    UnsupportedOrder(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// An error tied to a 1-based line of a text input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocatedError {
    pub line: usize,
    pub message: String,
}

impl LocatedError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for LocatedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for LocatedError {}
