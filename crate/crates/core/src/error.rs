//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by quantization, graph, and I/O operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric format description is invalid (bad bit-widths, bias out of range, ...).
    #[error("invalid format: {0}")]
    InvalidFormat(String),

    /// Tensor shapes are inconsistent with the operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violates a precondition (empty tensor, bad axis, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A request exceeds a hard resource bound (e.g. grid enumeration past 16 bits).
    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    /// Model or dataset file does not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    /// Model or dataset file has an unsupported version.
    #[error("unsupported file version {0}")]
    UnsupportedVersion(u32),

    /// Model or dataset file ended prematurely.
    #[error("truncated file while reading {0}")]
    Truncated(String),

    /// A record inside a model or dataset file is malformed.
    #[error("malformed file: {0}")]
    Malformed(String),

    /// A required calibration entry is missing for a quantization site.
    #[error("missing calibration entry for site {0}")]
    MissingCalibration(String),

    /// A recipe or sweep configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical routine failed (e.g. Cholesky on a non-PD matrix).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
