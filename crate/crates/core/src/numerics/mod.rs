//! Dense linear algebra, deterministic random streams and activations.

pub mod activation;
mod eigen;
mod matrix;
mod rng;

pub use eigen::{
    balance, eigenvalues, hessenberg, hessenberg_qr, qr_decompose, Spectrum, MAX_EIGEN_DIM,
};
pub use matrix::Matrix;
pub(crate) use matrix::{axpy, dot};
pub use rng::RngState;
pub(crate) use rng::{sample_cumulative, validate_probabilities};

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> crate::Result<Matrix> {
    a.matmul(b)
}
