//! Dense linear algebra and reverse-mode differentiation.

pub mod autodiff;
pub mod cholesky;
mod matrix;

pub use autodiff::{Gradients, Graph, NodeId};
pub use cholesky::{chol_logdet, chol_solve, cholesky, CholeskyFactor};
pub use matrix::Matrix;
