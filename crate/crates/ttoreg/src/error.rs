//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the registration engine and its tooling.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem failure, tagged with the offending path.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A stored file violates its format contract (bad header, payload size
    /// mismatch, non-finite values, unknown dtype, ...).
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Shapes that must agree do not.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// A caller-supplied value breaks a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The optimization produced a non-finite loss or gradient; the run is
    /// aborted rather than silently continued.
    #[error("diverged: non-finite {what} at {context}")]
    Diverged { what: String, context: String },

    /// The synthetic generator could not place non-overlapping structures
    /// within the retry budget.
    #[error("structure placement failed: {0}")]
    Placement(String),
}

impl Error {
    /// Stable machine-readable classification used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::DimMismatch(_) => "dim_mismatch",
            Error::Invalid(_) => "invalid",
            Error::Diverged { .. } => "diverged",
            Error::Placement(_) => "placement",
        }
    }

    /// One-line JSON rendering for scripts that parse stderr.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"error\":{{\"kind\":{},\"message\":{}}}}}",
            serde_json::to_string(self.kind()).unwrap(),
            serde_json::to_string(&self.to_string()).unwrap()
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
