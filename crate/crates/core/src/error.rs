use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("degenerate patch: {0}")]
    DegeneratePatch(&'static str),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("need at least {required} matches, got {got}")]
    InsufficientMatches { required: usize, got: usize },

    #[error("cloud has no ground probabilities; annotate before filtering")]
    NotAnnotated,

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("pipeline failed at {stage}: {reason}")]
    Pipeline { stage: &'static str, reason: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
