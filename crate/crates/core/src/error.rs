use std::path::PathBuf;

use cso_autodiff::{GraphError, OptimError};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("ground-truth encoding failed: {0}")]
    Encoding(String),
    #[error("linear algebra failure: {0}")]
    LinAlg(String),
    #[error("ISTA diverged after {iterations} iterations (step size {step_size}, lambda {lambda})")]
    Divergence {
        iterations: usize,
        step_size: f64,
        lambda: f64,
    },
    #[error("steering-matrix fingerprint mismatch: checkpoint has {expected}, supplied matrix is {found}")]
    Fingerprint { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
