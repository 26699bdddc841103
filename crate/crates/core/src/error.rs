//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violated a precondition (non-finite entries, empty sets, bad ranges).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Vector or matrix dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite: pivot {pivot} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    /// A graph node was built or evaluated with incompatible shapes.
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: String,
        detail: String,
    },

    /// Backward was requested from a node that is not 1x1.
    #[error("loss node {node} is not scalar: {rows}x{cols}")]
    NonScalarLoss {
        node: usize,
        rows: usize,
        cols: usize,
    },

    /// A class id was expected in a store or dataset but is absent.
    #[error("class {0} not found")]
    MissingClass(u32),

    /// Binary file did not match the expected format.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at batch {batch} (lr={lr}): {value}")]
    NonFiniteLoss { batch: usize, lr: f64, value: f64 },

    /// Configuration value out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A loaded artifact was produced under a different configuration.
    #[error("fingerprint mismatch: file has {found}, expected {expected}")]
    FingerprintMismatch { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
