use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the attention-map toolkit.
#[derive(Debug, Error)]
pub enum OvamError {
    #[error("prompt has {count} tokens, backend accepts at most {max}")]
    PromptTooLong { count: usize, max: usize },

    #[error("backend `{0}` is not available")]
    BackendUnavailable(String),

    #[error("trace is incomplete: missing {what} for block `{block}` at step {step}")]
    PartialTrace {
        what: &'static str,
        block: String,
        step: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optimization diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        last_finite: Box<crate::optimizer::OptimizationResult>,
    },

    #[error("no image-text scorer configured; refusing to filter")]
    ScorerUnavailable,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = OvamError> = std::result::Result<T, E>;

impl OvamError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OvamError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        OvamError::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Short machine-readable tag, used by the CLI and service error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            OvamError::PromptTooLong { .. } => "prompt_too_long",
            OvamError::BackendUnavailable(_) => "backend_unavailable",
            OvamError::PartialTrace { .. } => "partial_trace",
            OvamError::Dimension { .. } => "dimension",
            OvamError::NonFinite(_) => "non_finite",
            OvamError::InvalidArgument(_) => "invalid_argument",
            OvamError::Config(_) => "config",
            OvamError::Divergence { .. } => "divergence",
            OvamError::ScorerUnavailable => "scorer_unavailable",
            OvamError::Io { .. } => "io",
            OvamError::Format { .. } => "format",
            OvamError::Image(_) => "image",
            OvamError::Json(_) => "json",
        }
    }
}
