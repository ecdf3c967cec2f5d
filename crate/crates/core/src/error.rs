//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A scalar argument is outside its valid range.
    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    /// Misuse of the autodiff tape (non-scalar root, double backward, ...).
    #[error("tape contract violated: {0}")]
    Tape(String),

    /// A forward operation produced NaN or Inf.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// Training loss became non-finite.
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    /// A guidance gradient or state became non-finite during sampling.
    #[error("sampler diverged at step t={step}")]
    SamplerDiverged { step: usize },

    /// Input data violates a precondition (empty cube, all-zero signal, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A metric is undefined for the given inputs.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Configuration file or override problem.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Cube container: leading magic bytes are not "HSIC".
    #[error("bad magic bytes: not a cube file")]
    BadMagic,

    /// Cube container: unsupported format version.
    #[error("unsupported cube file version {0}")]
    UnsupportedVersion(u16),

    /// Cube container: file ends before the declared payload.
    #[error("truncated cube file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    /// Cube container: stored checksum does not match the payload.
    #[error("cube payload CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    /// Image export: values outside [0, 1].
    #[error("image export requires values in [0,1]: found {0}")]
    PixelRange(f64),
}
