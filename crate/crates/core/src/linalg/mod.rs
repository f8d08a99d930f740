//! Dense vector/matrix primitives and the closed-form ridge solver.
//!
//! Everything here is generic over [`Scalar`](crate::Scalar); the crate root
//! exposes `f64` aliases used by the extraction pipeline.

mod cosine;
mod matrix;
mod ridge;
mod vector;

pub use cosine::{cosine, random_abs_cosine_baseline, random_pair_cosines, CosineSummary};
pub use matrix::Matrix;
pub use ridge::{ridge_fit, ridge_fit_with, RidgeSolution, SolvePath};
pub use vector::Vector;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("regularized normal matrix is numerically singular")]
    SingularSystem,
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("vector must have at least one element")]
    EmptyVector,
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("ridge penalty must be a finite non-negative number, got {0}")]
    InvalidLambda(f64),
}

pub type Result<T> = std::result::Result<T, LinalgError>;
