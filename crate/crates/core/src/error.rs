use std::io;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: invalid shape {shape}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Shape,
        reason: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-scalar loss of shape {0} passed to backward")]
    NonScalarLoss(Shape),
    #[error("diverged at iteration {iter}: {reason}")]
    Diverged { iter: usize, reason: String },
    #[error("conjugate gradients did not converge in {iters} iterations (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn mismatch(op: &'static str, left: Shape, right: Shape) -> Self {
        Error::ShapeMismatch { op, left, right }
    }

    pub(crate) fn invalid_shape(op: &'static str, shape: Shape, reason: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            shape,
            reason: reason.into(),
        }
    }
}
