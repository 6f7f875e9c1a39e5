use thiserror::Error;

/// Errors produced anywhere in the simulation or reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate optical system: |B| = {b} is below the threshold {threshold}")]
    DegenerateSystem { b: f64, threshold: f64 },
    #[error("feature unresolvable on grid: {0}")]
    Unresolvable(String),
    #[error("input not time-sorted at index {0}")]
    Unsorted(usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("fit did not converge after {iterations} iterations (last a={last_a}, b={last_b}, sigma={last_sigma})")]
    NoConvergence {
        iterations: usize,
        last_a: f64,
        last_b: f64,
        last_sigma: f64,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::InvalidParameter(_)
            | Error::Unresolvable(_)
            | Error::DegenerateSystem { .. } => 2,
            Error::Io(_) | Error::Format(_) | Error::Unsorted(_) => 3,
            Error::GridMismatch(_)
            | Error::NonFinite(_)
            | Error::Empty(_)
            | Error::NoConvergence { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
