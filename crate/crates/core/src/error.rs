use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("non-finite value produced by `{primitive}` at tape node {node}")]
    NonFinite { primitive: &'static str, node: usize },

    #[error("tape has {0} outputs; a scalar single-output tape is required")]
    NotScalarOutput(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stepsize {eta} violates the certificate eta < 1/beta = {limit}")]
    CertificateViolation { eta: f64, limit: f64 },

    #[error("objective has no separable components")]
    MissingComponents,

    #[error("every learning rate in the grid diverged: {0:?}")]
    AllDiverged(Vec<f64>),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
