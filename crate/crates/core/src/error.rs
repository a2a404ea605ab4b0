use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid probability vector: {0}")]
    InvalidProbVector(String),

    #[error("cluster count must be at least 1")]
    ZeroClusters,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("support violation at index {index}: p = {p} but q = 0")]
    SupportViolation { index: usize, p: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("enumeration of {required} assignments exceeds cap {cap}")]
    EnumerationCap { required: f64, cap: u64 },

    #[error("cluster {cluster} has {actual} members, constraint requires {required}")]
    ConstraintInfeasible {
        cluster: usize,
        required: usize,
        actual: usize,
    },

    #[error("matrix entry at ({row}, {col}) is not strictly positive: {value}")]
    NonPositiveEntry { row: usize, col: usize, value: f64 },

    #[error("sinkhorn did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("vector {index} is not unit norm (norm {norm})")]
    NotNormalized { index: usize, norm: f64 },

    #[error("tie in nearest-centroid assignment for sample {sample}")]
    ArgminTie { sample: usize },

    #[error("class {class} has {available} samples but quota is {quota}")]
    ClassTooSmall {
        class: usize,
        available: usize,
        quota: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("io: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
