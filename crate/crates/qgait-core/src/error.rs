//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors raised by tensor ops, quantizers, data generation, training and
/// lowering. Variants mirror the failure classes of the public contracts.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape or extent mismatch.
    Dimension(String),
    /// Invalid configuration value (bit-width, step size, split sizes, ...).
    Config(String),
    /// Non-finite value or arithmetic range violation.
    Numeric(String),
    /// API misuse (backward twice, attaching a quantizer twice, ...).
    Usage(String),
    /// Argument outside a function's mathematical domain (e.g. k < 1).
    Domain(String),
    /// Training diverged or failed at a specific iteration.
    Training { iteration: usize, message: String },
    /// Checkpoint cannot be lowered to the integer path.
    Lowering(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Training { iteration, message } => {
                write!(f, "training error at iteration {iteration}: {message}")
            }
            Error::Lowering(m) => write!(f, "lowering error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
