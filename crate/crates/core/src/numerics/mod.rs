//! Dense linear algebra and reverse-mode differentiation.

mod matrix;
mod optim;
mod scalar;
mod solve;
mod tape;

pub use matrix::Matrix;
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use solve::solve_spd;
pub use tape::{sigmoid, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {}x{} and {}x{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("expected {expected} elements, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("degenerate vector: norm {norm:e} is not above {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },
    #[error("loss must be 1x1, got {}x{}", shape.0, shape.1)]
    NonScalarLoss { shape: (usize, usize) },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a single row, got {}x{}", shape.0, shape.1)]
    NotRowVector { shape: (usize, usize) },
    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}
