//! Small dense helpers on top of nalgebra. Matrices here are d×d with d tiny.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative singular-value cutoff used for rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

/// `A · B := Tr(A Bᵀ)`.
pub fn frobenius_dot(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Square root of a symmetric PSD matrix; eigenvalues within `clamp_tol` below zero are set to zero.
pub fn sqrt_psd(m: &Matrix, clamp_tol: f64) -> Result<Matrix> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -clamp_tol * scale {
            return Err(Error::Singular("sqrt_psd: indefinite input"));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix with relative cutoff `rtol`.
pub fn pinv_symmetric(m: &Matrix, rtol: f64) -> Matrix {
    let eig = SymmetricEigen::new(symmetrize(m));
    let top = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let cut = rtol * top;
    let inv = eig
        .eigenvalues
        .map(|v| if v.abs() > cut && v.abs() > 0.0 { 1.0 / v } else { 0.0 });
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&inv) * q.transpose()
}

pub fn inverse(m: &Matrix, what: &'static str) -> Result<Matrix> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        if v == 0.0 || !v.is_finite() {
            return Err(Error::Singular(what));
        }
        return Ok(DMatrix::from_element(1, 1, 1.0 / v));
    }
    let inv = m.clone().try_inverse().ok_or(Error::Singular(what))?;
    if inv.iter().all(|v| v.is_finite()) {
        Ok(inv)
    } else {
        Err(Error::Singular(what))
    }
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}
