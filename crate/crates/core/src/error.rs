use std::path::PathBuf;

/// Errors produced by the training engine and the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or hyper-parameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract, e.g. passed a cache from a different forward pass.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity reached a parameter update or the loss.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iter}: {reason}")]
    Diverged { iter: usize, reason: String },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
