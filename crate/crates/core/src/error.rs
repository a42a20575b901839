//! Error type shared across the crate.

use alloc::string::String;

/// Crate-wide error. Variants map onto the stable process exit codes used by
/// the CLI: config/contract problems are caller errors, numeric problems
/// abort the surrounding training step.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A forward or backward pass produced NaN or Inf.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Input sequence shorter than the subsampler can reduce.
    #[error("input too short: {0}")]
    InputTooShort(String),
    /// Sequence exceeds the positional-encoding capacity.
    #[error("capacity exceeded: {0}")]
    Capacity(String),
}

pub type Result<T> = core::result::Result<T, Error>;
