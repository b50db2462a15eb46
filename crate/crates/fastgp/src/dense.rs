//! Small dense linear-algebra helpers used by the sampler, the dense
//! oracles and the preconditioner internals.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// In-place blocked lower Cholesky factorization. Panel factorization is
/// unblocked; the trailing update goes through nalgebra's gemm, which keeps
/// N = 5000 factorizations in the seconds range.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch { context: "cholesky", expected: n, got: a.ncols() });
    }
    let mut l = a.clone_owned();
    const NB: usize = 128;
    let mut start = 0;
    while start < n {
        let nb = NB.min(n - start);
        // Unblocked factorization of the diagonal panel.
        for j in start..start + nb {
            let mut djj = l[(j, j)];
            for k in start..j {
                djj -= l[(j, k)] * l[(j, k)];
            }
            if djj <= 0.0 || !djj.is_finite() {
                return Err(Error::NotPositiveDefinite(format!(
                    "cholesky pivot {djj:.3e} at index {j}"
                )));
            }
            let ljj = djj.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..(start + nb) {
                let mut v = l[(i, j)];
                for k in start..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / ljj;
            }
            // Panel rows below the block for this column.
            for i in (start + nb)..n {
                let mut v = l[(i, j)];
                for k in start..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / ljj;
            }
        }
        // Trailing symmetric update: A22 -= L21 L21^T (gemm-backed).
        let rest = n - start - nb;
        if rest > 0 {
            let l21 = l.view((start + nb, start), (rest, nb)).clone_owned();
            let update = &l21 * l21.transpose();
            let mut a22 = l.view_mut((start + nb, start + nb), (rest, rest));
            a22 -= update;
        }
        start += nb;
    }
    // Zero the strict upper triangle.
    for j in 1..n {
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
    }
    Ok(l)
}

/// Solves L L^T x = b in place given the lower factor.
pub fn cholesky_solve_vec(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut v = x[i];
        for k in 0..i {
            v -= l[(i, k)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut v = x[i];
        for k in (i + 1)..n {
            v -= l[(k, i)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    x
}

/// log det(A) from the lower Cholesky factor of A.
pub fn logdet_from_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}
