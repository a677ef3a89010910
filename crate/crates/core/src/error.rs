use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("solver did not converge after {iterations} iterations (last step {last_delta:e}); trace: {trace:?}")]
    NoConvergence {
        iterations: usize,
        last_delta: f64,
        trace: Vec<Vec<f64>>,
    },

    #[error("non-finite {task} loss at step {step}; parameters snapshotted at {snapshot}")]
    NonFiniteLoss {
        task: &'static str,
        step: usize,
        snapshot: String,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
