use thiserror::Error;

use crate::geometry::GeometryError;
use crate::io::IoError;
use crate::scenesim::SimError;
use crate::tensor::TensorError;

/// Errors from the model, training, and evaluation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Invalid(String),
    #[error("fused point cloud is empty: no valid depth in any view")]
    EmptyCloud,
    #[error("numeric divergence: {0}")]
    Divergence(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code: 1 validation, 2 IO, 3 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Tensor(TensorError::Io { .. }) | Error::Tensor(TensorError::Checkpoint { .. }) => 2,
            Error::Sim(SimError::Io(_)) => 2,
            Error::Divergence(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
