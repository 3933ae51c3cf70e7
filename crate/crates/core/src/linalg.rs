//! Small dense linear-algebra helpers shared by the model, geometry and
//! analysis modules. Everything here works on `nalgebra` dynamic matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigenvalues in `[-PSD_CLAMP, 0)` are treated as round-off and clamped to zero.
pub const PSD_CLAMP: f64 = 1e-10;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Fill column by column so the draw order is fixed for a given seed.
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).norm()
}

/// Eigen-decomposition of the symmetric part of `a`, eigenvalues ascending.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let (values, _) = sym_eigen(a);
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let (values, _) = sym_eigen(a);
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Applies `f` to the spectrum of a symmetric matrix.
pub fn spectral_map(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen(a);
    let mapped = DVector::from_iterator(values.len(), values.iter().map(|&x| f(x)));
    &vectors * DMatrix::from_diagonal(&mapped) * vectors.transpose()
}

/// Clamped spectrum of a PSD matrix; rejects eigenvalues below `-PSD_CLAMP`.
fn psd_spectrum(a: &DMatrix<f64>, field: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !a.is_square() {
        return Err(Error::dim(
            "psd matrix",
            "square",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    let (mut values, vectors) = sym_eigen(a);
    for v in values.iter_mut() {
        if !v.is_finite() || *v < -PSD_CLAMP {
            return Err(Error::param(
                field,
                format!("not positive semi-definite (eigenvalue {v:e})"),
            ));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((values, vectors))
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(a: &DMatrix<f64>, field: &str) -> Result<DMatrix<f64>> {
    let (values, vectors) = psd_spectrum(a, field)?;
    let roots = values.map(f64::sqrt);
    Ok(&vectors * DMatrix::from_diagonal(&roots) * vectors.transpose())
}

/// A factor `L` with `L L' = a`, used for Gaussian sampling.
pub fn psd_factor(a: &DMatrix<f64>, field: &str) -> Result<DMatrix<f64>> {
    let (values, vectors) = psd_spectrum(a, field)?;
    let roots = values.map(f64::sqrt);
    Ok(vectors * DMatrix::from_diagonal(&roots))
}

/// `a^{-1/2}` for a symmetric positive-definite matrix.
pub fn spd_inv_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(a, |x| 1.0 / x.sqrt())
}

pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square() && asymmetry(a) <= tol * (1.0 + a.norm()) && min_eigenvalue(a) >= -tol
}

/// Largest singular value.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Solves `a x = b` for symmetric positive-definite `a` by Cholesky.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    Some(chol.solve(b))
}

/// Numerical rank via singular values relative to the largest one.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = a.singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Thin QR orthonormalization with the sign convention `diag(R) >= 0`, so the
/// result is a deterministic function of the input.
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols().min(r.nrows()) {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `|a' a - I|_F`.
pub fn orthonormality_residual(a: &DMatrix<f64>) -> f64 {
    let gram = a.tr_mul(a);
    (gram - DMatrix::identity(a.ncols(), a.ncols())).norm()
}

pub fn rows_to_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::param(field, "ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormalize_is_deterministic_and_orthonormal() {
        let mut rng = seeded_rng(3);
        let g = gaussian_matrix(6, 3, &mut rng);
        let q1 = orthonormalize(&g);
        let q2 = orthonormalize(&g);
        assert_eq!(q1, q2);
        assert!(orthonormality_residual(&q1) < 1e-12);
    }

    #[test]
    fn psd_factor_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let l = psd_factor(&a, "a").unwrap();
        assert!((&l * l.transpose() - &a).norm() < 1e-12);
        let s = psd_sqrt(&a, "a").unwrap();
        assert!((&s * &s - &a).norm() < 1e-12);
    }

    #[test]
    fn psd_rejects_negative_and_clamps_roundoff() {
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-6]));
        assert!(psd_factor(&neg, "m").is_err());
        let tiny = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-12]));
        let l = psd_factor(&tiny, "m").unwrap();
        assert_eq!(l[(1, 1)], 0.0);
    }

    #[test]
    fn op_norm_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -3.0, 2.0]));
        assert!((op_norm(&a) - 3.0).abs() < 1e-12);
    }
}
