use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor file does not start with the expected magic or carries an
    /// unknown dtype byte.
    #[error("bad tensor file format: {0}")]
    Format(String),

    /// Tensor file payload does not match the dimensions in its header.
    #[error("tensor payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: u64, found: u64 },

    #[error("tensor dimensions overflow: {0}")]
    Overflow(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// An optimizer step saw non-finite gradients for the named parameter.
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    /// Training loss became non-finite; the network has been restored to the
    /// last snapshot taken before the failing step.
    #[error("training diverged at iteration {iter} (loss {loss})")]
    Diverged { iter: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
