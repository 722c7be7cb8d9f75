use thiserror::Error;

/// Errors raised by the emulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("activation pattern entry {value} at channel {channel} is not in {{-1, 0, 1}}")]
    InvalidPattern { channel: usize, value: f64 },
    #[error("enumeration of 3^{exponent} patterns exceeds the cap of {cap}")]
    CapExceeded { exponent: usize, cap: u64 },
    #[error("no candidate directions remain")]
    EmptyCandidates,
    #[error("index {0} is not present")]
    MissingIndex(usize),
    #[error("matrix is singular (|det| = {0:e})")]
    Singular(f64),
    #[error("search exceeded the node budget of {0}")]
    NodeBudgetExceeded(u64),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("rollout diverged at step {step}: norm {norm:e}")]
    Diverged { step: usize, norm: f64 },
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("unsupported architecture: {0}")]
    Architecture(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
