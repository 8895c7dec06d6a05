//! Dense linear-algebra kernel shared by the whole simulator.

mod matrix;
mod rng;
mod svd;

pub use matrix::{dot, norm2, outer, Matrix};
pub use rng::{derive_seed, laplace_from_uniform, tags, Rng};
pub use svd::{numerical_rank, singular_values, svd_truncated, SvdResult, MAX_SWEEPS};

pub fn sample_gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    rng.gaussian_matrix(rows, cols, std)
}

pub fn sample_laplace(rng: &mut Rng, scale: f64) -> f64 {
    rng.laplace(scale)
}

/// Orthonormal basis (as rows) of the row space of `m`, keeping singular
/// directions above `rel_tol · σ_max`.
pub fn row_space_basis(m: &Matrix, rel_tol: f64) -> crate::Result<Matrix> {
    let k = m.rows().min(m.cols());
    let svd = svd_truncated(m, k)?;
    let max = svd.s.first().copied().unwrap_or(0.0);
    let keep = svd.s.iter().filter(|&&s| max > 0.0 && s > rel_tol * max).count();
    let mut basis = Matrix::zeros(keep, m.cols());
    for i in 0..keep {
        basis.row_mut(i).copy_from_slice(svd.vt.row(i));
    }
    Ok(basis)
}
