//! Small dense kernels on row-major `f64` buffers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Orthonormalizes the columns of a row-major `rows x cols` matrix in place
/// (thin QR, Q kept). Uses modified Gram-Schmidt with one re-orthogonalization
/// pass, which yields an R factor with a positive diagonal; that sign convention
/// makes Q unique for a given input.
pub fn orthonormalize_columns(a: &mut [f64], rows: usize, cols: usize) -> Result<()> {
    if a.len() != rows * cols {
        bail!(Shape, "matrix buffer has {} entries, expected {}", a.len(), rows * cols);
    }
    if cols > rows {
        bail!(Input, "cannot orthonormalize {cols} columns in dimension {rows}");
    }
    let mut col = vec![0.0; rows];
    let mut other = vec![0.0; rows];
    for j in 0..cols {
        for i in 0..rows {
            col[i] = a[i * cols + j];
        }
        for _pass in 0..2 {
            for k in 0..j {
                for i in 0..rows {
                    other[i] = a[i * cols + k];
                }
                let proj = dot(&col, &other);
                for i in 0..rows {
                    col[i] -= proj * other[i];
                }
            }
        }
        let norm = libm::sqrt(dot(&col, &col));
        if norm == 0.0 || !norm.is_finite() {
            bail!(Input, "column {j} is linearly dependent");
        }
        for i in 0..rows {
            a[i * cols + j] = col[i] / norm;
        }
    }
    Ok(())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for symmetric positive-definite `A` (row-major `n x n`)
/// through a Cholesky factorization.
pub fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n {
        bail!(Shape, "cholesky_solve expects {n}x{n} system");
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    bail!(Input, "matrix is not positive definite (pivot {i})");
                }
                l[i * n + i] = libm::sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}
