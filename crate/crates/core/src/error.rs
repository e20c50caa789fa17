use thiserror::Error;

/// Errors raised by the library. Contract violations carry a message naming the
/// precondition that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("linear solve failed: {0}")]
    Solve(&'static str),

    #[error("trace required: {0}")]
    MissingTrace(&'static str),

    #[error("integer overflow: {0}")]
    Overflow(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        // NaN comparisons are false, so they fail the contract
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
