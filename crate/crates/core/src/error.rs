use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("orthogonality violated in {site}: |cos| = {cos:e} exceeds {tol:e}")]
    Orthogonality { site: String, cos: f64, tol: f64 },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("bad header in {what}: {detail}")]
    BadHeader { what: String, detail: String },

    #[error("truncated {what}: needed {needed} more bytes at offset {offset}")]
    Truncated {
        what: String,
        offset: usize,
        needed: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable class of the failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::UnknownWord(_) => "config",
            Error::Io { .. } => "io",
            Error::BadHeader { .. } | Error::Truncated { .. } | Error::EmptyDataset => "corrupt_file",
            Error::DimMismatch(_) => "dim_mismatch",
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => "non_finite",
            Error::Orthogonality { .. } => "orthogonality",
            Error::Shape { .. } | Error::InvalidArgument(_) | Error::TokenOutOfRange { .. } => "invalid_argument",
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
