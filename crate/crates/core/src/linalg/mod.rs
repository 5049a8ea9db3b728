//! Dense symmetric and general matrix numerics for small problems.

mod eigen;
mod factor;
mod matrix;

pub use eigen::{eigenvalues, max_eig, min_eig, spectral_radius, sym_eig, SymEigen};
pub use factor::{
    backward_substitute_transposed, cholesky, cholesky_inverse, cholesky_solve, forward_substitute,
    rank, solve, solve_vec,
};
pub use matrix::{dot, frobenius_norm, norm2, Matrix, SymMatrix};

/// Largest singular value, via the spectrum of `mᵀm`.
pub fn spectral_norm(m: &Matrix) -> crate::Result<f64> {
    let gram = SymMatrix::from_symmetric_part(&(&m.transpose() * m));
    Ok(max_eig(&gram)?.max(0.0).sqrt())
}
