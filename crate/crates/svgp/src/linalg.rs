//! Dense lower-triangular primitives shared by the whole engine.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Plain Cholesky factorization `a = L·Lᵀ`. Returns `None` when a pivot is
/// not strictly positive.
pub fn cholesky_lower(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Trace-scaled jitter ladder: try jitter 0, then `1e-10·tr(a)/n` escalating
/// by factors of 10 up to `1e-4·tr(a)/n`. Returns the factor and the jitter
/// that succeeded.
pub fn chol_with_jitter(a: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((Array2::zeros((0, 0)), 0.0));
    }
    let scale = a.diag().sum() / n as f64;
    let mut jitter = 0.0;
    let mut rung = 0;
    loop {
        let trial = if jitter == 0.0 {
            a.clone()
        } else {
            let mut t = a.clone();
            for i in 0..n {
                t[[i, i]] += jitter;
            }
            t
        };
        if let Some(l) = cholesky_lower(&trial) {
            if rung > 1 {
                log::warn!("cholesky required jitter {jitter:.3e} (rung {rung}, n = {n})");
            }
            return Ok((l, jitter));
        }
        rung += 1;
        let next = if rung == 1 { 1e-10 * scale } else { jitter * 10.0 };
        if !(next > 0.0) || next > 1e-4 * scale * (1.0 + 1e-12) {
            return Err(Error::Factorization { size: n, max_jitter: jitter });
        }
        jitter = next;
    }
}

/// Forward substitution: solve `L·X = B` column by column.
pub fn solve_lower(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let m = b.ncols();
    debug_assert_eq!(b.nrows(), n);
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Back substitution: solve `Lᵀ·X = B` column by column.
pub fn solve_lower_t(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let m = b.ncols();
    debug_assert_eq!(b.nrows(), n);
    let mut x = b.clone();
    for c in 0..m {
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// `vᵀ·v` column norms, used for diagonal-only predictive variances.
pub fn col_sq_norms(v: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(v.ncols());
    for c in 0..v.ncols() {
        let mut s = 0.0;
        for r in 0..v.nrows() {
            s += v[[r, c]] * v[[r, c]];
        }
        out[c] = s;
    }
    out
}

pub fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
