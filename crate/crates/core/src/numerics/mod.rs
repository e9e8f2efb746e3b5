//! Small dense complex-Hermitian linear algebra and a self-contained SDP solver.

mod hermitian;
mod nnqp;
mod sdp;

pub use hermitian::{eig_hermitian, HermitianEigen, HermitianMatrix, C64};
pub use nnqp::{solve_nnqp, NnqpSolution};
pub use sdp::{solve_sdp, ConstraintSense, SdpConstraint, SdpProblem, SdpSettings, SdpSolution, SdpStatus};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("factorization failed: {0}")]
    Factorization(String),
}
