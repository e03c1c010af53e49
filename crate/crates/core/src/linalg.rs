//! Small dense linear algebra on row-major `Vec<f64>` matrices.
//!
//! Market dimensions are tiny (d ≤ 5 in every preset), so the helpers here
//! favor plain slices over a matrix type in public signatures.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub fn to_dmatrix(m: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, m)
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

pub fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

pub fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d).map(|i| (0..d).map(|k| a[i * d + k] * x[k]).sum()).collect()
}

/// `a aᵀ` for a square row-major `a`.
pub fn gram(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
        }
    }
    out
}

pub fn outer(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().flat_map(|a| y.iter().map(move |b| a * b)).collect()
}

pub fn frobenius_sq(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Lower-triangular Cholesky factor of a symmetric PSD matrix.
///
/// Pivots below `1e-14 * max diag` are treated as exact zeros so singular
/// covariances (e.g. a zero-volatility market) still factor.
pub fn cholesky_psd(m: &[f64], d: usize) -> Result<Vec<f64>> {
    let scale = (0..d).map(|i| m[i * d + i].abs()).fold(0.0, f64::max);
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = m[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if diag < -1e-10 * scale.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "matrix is not positive semi-definite (pivot {j} = {diag:e})"
            )));
        }
        if diag <= tol {
            continue;
        }
        let ljj = diag.sqrt();
        l[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut s = m[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Projects a (nearly) symmetric matrix onto the PSD cone by clipping
/// eigenvalues at `floor`, then re-symmetrizes.
pub fn nearest_psd(m: &[f64], d: usize, floor: f64) -> Vec<f64> {
    let mut a = to_dmatrix(m, d);
    a = (&a + a.transpose()) * 0.5;
    let eig = a.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let sym = (&rebuilt + rebuilt.transpose()) * 0.5;
    from_dmatrix(&sym)
}

pub fn min_eigenvalue(m: &[f64], d: usize) -> f64 {
    let a = to_dmatrix(m, d);
    let a = (&a + a.transpose()) * 0.5;
    a.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let d = b.len();
    let lu = to_dmatrix(a, d).lu();
    let x = lu
        .solve(&DVector::from_column_slice(b))
        .ok_or_else(|| Error::Singular(format!("{d}x{d} system")))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{d}x{d} system")));
    }
    Ok(x.iter().cloned().collect())
}

pub fn inverse(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let inv = to_dmatrix(a, d)
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("{d}x{d} inverse")))?;
    Ok(from_dmatrix(&inv))
}
