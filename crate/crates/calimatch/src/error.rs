//! Error types shared across the crate.
//!
//! Variants are grouped by how a caller should react: configuration problems
//! are user-fixable, I/O problems point at the filesystem, and numeric
//! failures mean a run went unstable and must not be silently continued.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, flags, or schema violations.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data passed to an operation (shape mismatch, bad labels,
    /// out-of-domain scalars).
    #[error("validation error: {0}")]
    Validation(String),

    /// Filesystem or serialization failure.
    #[error("i/o error: {0}")]
    Io(String),

    /// A numeric quantity went non-finite; `component` names the loss term or
    /// head that produced it.
    #[error("numeric failure in {component}: {detail}")]
    Numeric { component: String, detail: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }

    pub fn numeric(component: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            component: component.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for CLI surfaces: 3 config, 4 I/O, 5 numeric.
    /// (0 is success and 2 is reserved for usage errors at the CLI layer.)
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) => 3,
            Error::Io(_) => 4,
            Error::Numeric { .. } => 5,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
