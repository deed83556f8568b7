use thiserror::Error;

/// Errors produced by the library.
///
/// Variants are grouped by the kind of failure so that front-ends can map
/// them onto exit codes: configuration and usage problems are distinct from
/// domain failures such as an unphysical state.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unphysical input: {0}")]
    Unphysical(String),

    #[error("numerical error: {message} (condition number {condition:.3e})")]
    IllConditioned { message: String, condition: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resource budget exceeded: {what} needs {needed}, budget is {budget}")]
    Budget {
        what: String,
        needed: u64,
        budget: u64,
    },

    #[error("truncation loss {loss:.3e} exceeds tolerance {tolerance:.3e} at cutoff {cutoff}")]
    Truncation {
        loss: f64,
        tolerance: f64,
        cutoff: usize,
    },

    #[error("schema error at '{pointer}': {message}")]
    Schema { pointer: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn unphysical(msg: impl Into<String>) -> Self {
        Error::Unphysical(msg.into())
    }

    /// True for errors caused by bad user input rather than by the physics.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Schema { .. })
    }
}
