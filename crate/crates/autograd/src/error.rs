use crate::Shape;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("tensor data has {len} values, shape {shape} needs {expected}")]
    DataLength {
        shape: Shape,
        len: usize,
        expected: usize,
    },
    #[error("backward requires a scalar loss, got {0}")]
    NonScalarLoss(Shape),
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
