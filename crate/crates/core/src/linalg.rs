//! Cholesky factorization and SPD solves.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
    #[error("right-hand side has {found} rows, expected {expected}")]
    RhsMismatch { expected: usize, found: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("system is singular or contains non-finite values")]
    SingularSystem,
}

/// Initial diagonal jitter and the number of tenfold escalations tried when
/// a factorization fails.
pub const JITTER: f64 = 1e-10;
pub const JITTER_ESCALATIONS: usize = 3;

/// Lower-triangular `L` with `A = L L^T`.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>, LinalgError> {
    let (n, m) = a.dim();
    if n != m {
        return Err(LinalgError::NotSquare(n, m));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L L^T X = B` for every column of `B`.
pub fn cholesky_solve(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in i + 1..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Solves `A X = B` for symmetric positive-definite `A`, retrying with a
/// growing diagonal jitter if the factorization breaks down.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>, LinalgError> {
    let (n, m) = a.dim();
    if n != m {
        return Err(LinalgError::NotSquare(n, m));
    }
    if b.nrows() != n {
        return Err(LinalgError::RhsMismatch {
            expected: n,
            found: b.nrows(),
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(LinalgError::SingularSystem);
    }
    let mut jitter = 0.0;
    for attempt in 0..=JITTER_ESCALATIONS + 1 {
        let mut shifted = a.to_owned();
        if jitter > 0.0 {
            shifted.diag_mut().mapv_inplace(|d| d + jitter);
        }
        if let Ok(l) = cholesky(shifted.view()) {
            return Ok(cholesky_solve(l.view(), b));
        }
        jitter = if attempt == 0 { JITTER } else { jitter * 10.0 };
    }
    Err(LinalgError::SingularSystem)
}
