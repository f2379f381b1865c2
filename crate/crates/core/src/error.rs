use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MagError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MagError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown {kind}: {name}")]
    Lookup { kind: &'static str, name: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss at iteration {iteration}: {breakdown}")]
    NonFiniteLoss { iteration: u64, breakdown: String },

    #[error("failed to load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MagError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MagError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        MagError::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
