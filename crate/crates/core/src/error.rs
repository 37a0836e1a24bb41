//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for all fallible operations.
#[derive(Debug, Error)]
pub enum GecaError {
    /// Tensor extents do not line up (matmul inner dims, slice widths, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid configuration value (odd positional width, p outside [0,1], ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (timestep out of range, unknown label, empty set).
    #[error("input error: {0}")]
    Input(String),

    /// Caller violated a call-sequence contract (e.g. prev grid at t = T).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training error: {0}")]
    Training(String),

    /// Sampling produced a non-finite intermediate at timestep `t`.
    #[error("sampling error at t={t}: {msg}")]
    Sampling { t: usize, msg: String },

    /// On-disk artifact is malformed (bad magic, version, truncation).
    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GecaError>;
