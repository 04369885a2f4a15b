//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by layout construction, packing, masking, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or array shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (model dims, run flags, hyperparameters).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid data: bad samples, malformed dataset lines, empty inputs.
    #[error("data error: {0}")]
    Data(String),

    /// A row does not fit the fixed batch length.
    #[error("row of length {row_len} exceeds fixed length {fixed_len}")]
    RowOverflow { row_len: usize, fixed_len: usize },

    /// A packing unit is longer than the bin capacity.
    #[error("sample {sample_index} has unit length {length} exceeding bin capacity {capacity}")]
    UnpackableSample {
        sample_index: usize,
        length: usize,
        capacity: usize,
    },

    /// An attention row with no visible keys; never valid for any layout here.
    #[error("all-masked softmax row: {0}")]
    AllMasked(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Reference log-prob cache has no entry for a requested sample.
    #[error("reference cache miss for sample {sample_index}")]
    CacheMiss { sample_index: usize },

    /// An equivalence check exceeded its tolerance.
    #[error("verification failed: {0}")]
    Verification(String),

    /// Underlying IO failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
