use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors surfaced by the library.
///
/// Shape mismatches, invalid configurations, and numeric blow-ups are all
/// reported through this enum; none of the library paths panic on bad input.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A network or matrix dimension does not match its contract.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    /// A configuration value violates a documented constraint.
    InvalidConfig(String),
    /// An input value was NaN or infinite where a finite value is required.
    NonFinite(&'static str),
    /// Training produced a non-finite or runaway loss.
    Diverged { context: &'static str, loss: f64 },
    /// An operation was called with an empty collection that must be non-empty.
    Empty(&'static str),
    /// A task id was not found, or refers to the wrong kind of task.
    BadTask(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                context,
                expected,
                found,
            } => write!(
                f,
                "dimension mismatch in {context}: expected {expected}, found {found}"
            ),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFinite(context) => write!(f, "non-finite value in {context}"),
            Error::Diverged { context, loss } => {
                write!(f, "training diverged in {context}: loss {loss}")
            }
            Error::Empty(context) => write!(f, "{context} must be non-empty"),
            Error::BadTask(msg) => write!(f, "bad task reference: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
