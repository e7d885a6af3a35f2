//! Dense linear algebra kernels and the reverse-mode autodiff tape.

pub mod autodiff;
pub mod linalg;

pub use autodiff::{Tape, Tensor, Var};
pub use linalg::{orth, svd, sym_eig, DenseMatrix};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is not symmetric: max asymmetry {0:e}")]
    Symmetry(f64),
    #[error("{0} did not converge after {1} sweeps")]
    Convergence(&'static str, usize),
    #[error("all columns numerically zero")]
    Rank,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry encountered")]
    NonFinite,
    #[error("autodiff graph error: {0}")]
    Graph(String),
}
