//! Small dense complex linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Relative eigenvalue tolerance for PSD checks.
pub const PSD_TOL: f64 = 1e-9;

/// Eigenvalues below this (relative to the largest) are clamped to zero
/// when forming square roots.
pub const SQRT_CLAMP: f64 = 1e-12;

pub fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

pub fn trace(a: &CMat) -> Complex64 {
    a.diagonal().iter().sum()
}

/// `tr(A B)` without forming the product.
pub fn trace_product(a: &CMat, b: &CMat) -> Complex64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = ZERO;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Frobenius norm of `A - A^H` relative to `‖A‖`.
pub fn hermitian_defect(a: &CMat) -> f64 {
    let norm = a.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (a - a.adjoint()).norm() / norm
}

pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    a.is_square() && hermitian_defect(a) <= tol
}

/// `(A + A^H) / 2`.
pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(a: &CMat) -> Vec<f64> {
    let mut ev: Vec<f64> = hermitize(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Checks Hermiticity and that no eigenvalue falls below `-PSD_TOL·‖A‖₂`.
pub fn check_psd(a: &CMat, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("{what} is {}x{}", a.nrows(), a.ncols())));
    }
    if !is_hermitian(a, 1e-10) {
        return Err(Error::NotPsd(format!("{what} is not Hermitian")));
    }
    let ev = hermitian_eigenvalues(a);
    let scale = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(&min) = ev.first() {
        if min < -PSD_TOL * scale {
            return Err(Error::NotPsd(format!(
                "{what} has eigenvalue {min:e} (largest magnitude {scale:e})"
            )));
        }
    }
    Ok(())
}

/// Hermitian PSD square root through an eigendecomposition. Eigenvalues
/// below `SQRT_CLAMP` relative to the largest are treated as zero; anything
/// more negative than the PSD tolerance is rejected.
pub fn psd_sqrt(a: &CMat) -> Result<CMat> {
    check_psd(a, "square-root argument")?;
    let eig = hermitize(a).symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = a.nrows();
    let mut out = CMat::zeros(n, n);
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= SQRT_CLAMP * scale || lambda <= 0.0 {
            continue;
        }
        let s = lambda.sqrt();
        let v = eig.eigenvectors.column(idx);
        out += (v * v.adjoint()).scale(s);
    }
    Ok(hermitize(&out))
}

/// Inverse of a Hermitian positive-definite matrix via Cholesky.
pub fn hpd_inverse(a: &CMat) -> Result<CMat> {
    let chol = hermitize(a)
        .cholesky()
        .ok_or_else(|| Error::NotPsd("matrix is not positive definite".into()))?;
    Ok(hermitize(&chol.inverse()))
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn diag(v: &[Complex64]) -> CMat {
    CMat::from_diagonal(&CVec::from_column_slice(v))
}

/// Largest absolute entry difference.
pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).norm()))
}
