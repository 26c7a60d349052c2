//! Singular values by one-sided (Hestenes) Jacobi rotations.
//!
//! The rotations act on the columns of the orientation with fewer columns,
//! so the work matrix is `max(m, n) x min(m, n)`. Only the singular values
//! are recovered: after convergence they are the column norms.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Rotation threshold used when callers do not pick one.
pub const DEFAULT_SVD_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// The `r` largest singular values of `m`, sorted descending.
///
/// `tol` bounds the scaled off-diagonal `|a_p . a_q| / (|a_p| |a_q|)` below
/// which a column pair counts as orthogonal.
pub fn svd_values(m: &Matrix, r: usize, tol: f64) -> Result<Vec<f64>> {
    let min_dim = m.rows().min(m.cols());
    if r > min_dim {
        return Err(Error::param(format!("rank {r} exceeds min dimension {min_dim}")));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::param(format!("tolerance must be positive, got {tol}")));
    }
    let mut values = all_singular_values(m, tol);
    values.truncate(r);
    Ok(values)
}

/// Every singular value of `m` (`min(rows, cols)` of them), descending.
pub fn all_singular_values(m: &Matrix, tol: f64) -> Vec<f64> {
    // Columns of the tall orientation, stored contiguously.
    let mut cols: Vec<Vec<f64>> = if m.rows() >= m.cols() {
        (0..m.cols())
            .map(|j| (0..m.rows()).map(|i| m[(i, j)]).collect())
            .collect()
    } else {
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    };
    let n = cols.len();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (left, right) = cols.split_at_mut(q);
                let (ap, aq) = (&mut left[p], &mut right[0]);
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for (x, y) in ap.iter().zip(aq.iter()) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in ap.iter_mut().zip(aq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut values: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}
