//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset handling, model fitting, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// A required CSV column is absent from the header.
    #[error("missing column `{column}` in dataset header")]
    MissingColumn { column: String },

    /// The dataset file contains a header but no data rows, or nothing at all.
    #[error("dataset file `{path}` contains no data rows")]
    EmptyFile { path: String },

    /// A data row could not be interpreted (1-based row index, header excluded).
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    /// An argument violated a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Vector or matrix dimensions do not match what the operation expects.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An operation that needs data received an empty dataset.
    #[error("operation requires a non-empty dataset")]
    EmptyDataset,

    /// Too few samples for the requested estimator.
    #[error("{context}: need more than {needed} samples, got {got}")]
    TooFewSamples {
        context: &'static str,
        needed: usize,
        got: usize,
    },

    /// One or more configuration problems, reported together.
    #[error("invalid configuration: {}", problems.join("; "))]
    InvalidConfig { problems: Vec<String> },

    /// Rejection sampling exhausted its draw budget with zero acceptances.
    #[error(
        "model allocates no probability mass to condition {condition} \
         (0 acceptances in {draws} draws)"
    )]
    NoConditionMass { condition: String, draws: u64 },

    /// A numeric quantity became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Model fitting failed irrecoverably.
    #[error("fit failed: {0}")]
    Fit(String),

    /// A checkpoint or artifact file is malformed or has the wrong version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
