//! Crate-wide error type. Numeric preconditions surface as dedicated
//! variants so callers can distinguish recoverable geometry failures
//! (behind-camera point, degenerate triangulation) from I/O and format
//! problems.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion norm {norm} is not within 1e-6 of unit")]
    InvalidQuaternion { norm: f64 },

    #[error("metric parameter norm {norm} outside [0, 0.99]")]
    MetricDomain { norm: f64 },

    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("triangulation ill-conditioned: {reason}")]
    IllConditioned { reason: String },

    #[error("triangulation diverged after {iterations} iterations")]
    Divergence { iterations: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
