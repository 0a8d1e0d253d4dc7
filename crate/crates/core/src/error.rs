use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::Shape;
use crate::meta_engine::RunLog;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    Shape { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("gradient output must be a scalar, got shape {shape}")]
    NotScalar { shape: Shape },

    #[error("node {node} does not require gradients")]
    NoGradient { node: usize },

    #[error("finite difference: non-finite function value when perturbing parameter {param}, coordinate {index}")]
    FiniteDifference { param: usize, index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// A non-finite loss aborted training. The log holds every iteration up
    /// to and including the failing one.
    #[error("non-finite loss at iteration {iteration}")]
    Diverged { iteration: usize, log: Box<RunLog> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
