use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, sizes or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violating a value contract (labels, ranges, empty boxes).
    #[error("data error: {0}")]
    Data(String),

    /// API called out of order.
    #[error("usage error: {0}")]
    Usage(String),

    /// Bookkeeping that should be impossible, e.g. a missing cached prediction.
    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("training diverged at stage {stage}, step {step}: loss = {loss}")]
    Divergence { stage: usize, step: usize, loss: f64 },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
