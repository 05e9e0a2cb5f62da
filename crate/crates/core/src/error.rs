use thiserror::Error;

#[derive(Debug, Error)]
pub enum VosError {
    #[error("matrix is not symmetric positive definite (pivot {pivot} = {value:e})")]
    NotSpd { pivot: usize, value: f64 },

    #[error("matrix is not symmetric (|a[{row}][{col}] - a[{col}][{row}]| = {diff:e})")]
    NotSymmetric { row: usize, col: usize, diff: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("insufficient samples for class {class}: {count} (need at least 2)")]
    InsufficientSamples { class: usize, count: usize },

    #[error("non-finite {term} loss at iteration {iteration}")]
    NonFiniteLoss { term: &'static str, iteration: usize },

    #[error("backward called before a forward pass")]
    NoForwardPass,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VosError>;
