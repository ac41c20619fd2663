use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("shape mismatch at tape node {node} ({op}): {detail}")]
    NodeShape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NotPsd { eigenvalue: f64 },

    #[error("matrix is singular")]
    Singular,

    #[error("eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("backward pass needs a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("no deviation to aggregate")]
    NoDeviation,

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("training diverged: non-finite values on client {client}, round {round}, epoch {epoch}")]
    Diverged {
        client: usize,
        round: usize,
        epoch: usize,
    },

    #[error("dirichlet partition left a client empty after {attempts} attempts")]
    PartitionFailed { attempts: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
