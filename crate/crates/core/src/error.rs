use std::path::{Path, PathBuf};

use bridge_autodiff::{AutodiffError, OptimError};
use thiserror::Error;

use crate::trainer::Checkpoint;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss in {stage} at iteration {iteration}: {detail}")]
    NonFiniteLoss {
        stage: String,
        iteration: usize,
        detail: String,
        /// State before the failing step.
        last_good: Option<Box<Checkpoint>>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl CoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
