//! Small dense linear-algebra routines used by inference, GPTQ, and the
//! fixture builder. Everything is row-major `Vec<f64>`.

use crate::error::{Error, Result};

/// `C = A * B` with `A` of shape `rows_a x inner` and `B` of shape
/// `inner x cols_b`.
pub fn matmul(a: &[f64], b: &[f64], rows_a: usize, inner: usize, cols_b: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows_a * inner);
    debug_assert_eq!(b.len(), inner * cols_b);
    let mut c = vec![0.0; rows_a * cols_b];
    for i in 0..rows_a {
        for k in 0..inner {
            let aik = a[i * inner + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * cols_b..(k + 1) * cols_b];
            let crow = &mut c[i * cols_b..(i + 1) * cols_b];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// Lower-triangular Cholesky factor `L` with `A = L * L^T`.
///
/// Fails with the index and value of the first non-positive pivot, which is
/// the standard diagnostic for a matrix that is not positive definite.
pub fn cholesky_lower(a: &[f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Numerical(format!(
                        "Cholesky pivot {i} is non-positive ({sum:.3e}); matrix is not positive definite"
                    )));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn spd_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = cholesky_lower(a, n)?;
    let mut y = b.to_vec();
    // forward: L y = b
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    // backward: L^T x = y
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    Ok(y)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let x = spd_solve(a, &e, n)?;
        for row in 0..n {
            inv[row * n + col] = x[row];
        }
    }
    Ok(inv)
}

/// Transpose of a `rows x cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}
