//! Dense Cholesky factorisation and triangular solves for the small
//! inducing-point matrices.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Plain Cholesky; `None` when a pivot is not strictly positive.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Some(l)
}

#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: Array2<f64>,
    /// Diagonal jitter that was added before factorising.
    pub jitter: f64,
}

/// Cholesky of `K + jitter·I`, trying jitter levels from `1e-6·mean(diag)`
/// upward by factors of ten to `1e-2·mean(diag)`.
pub fn jittered_cholesky(k: ArrayView2<f64>) -> Result<JitteredCholesky> {
    let n = k.nrows();
    let scale = if n == 0 { 1.0 } else { k.diag().mean().unwrap_or(1.0).abs().max(f64::MIN_POSITIVE) };
    let mut jitter = 1e-6 * scale;
    let max = 1e-2 * scale * (1.0 + 1e-12);
    while jitter <= max {
        let mut kj = k.to_owned();
        for i in 0..n {
            kj[[i, i]] += jitter;
        }
        if let Some(factor) = cholesky(kj.view()) {
            return Ok(JitteredCholesky { factor, jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: jitter / 10.0 })
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let lii = l[[i, i]];
        for k in 0..i {
            let lik = l[[i, k]];
            if lik != 0.0 {
                let (head, mut tail) = x.view_mut().split_at(Axis(0), i);
                let src = head.row(k);
                tail.row_mut(0).scaled_add(-lik, &src);
            }
        }
        x.row_mut(i).mapv_inplace(|v| v / lii);
    }
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_t(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let lii = l[[i, i]];
        for k in (i + 1)..n {
            let lki = l[[k, i]];
            if lki != 0.0 {
                let (mut head, tail) = x.view_mut().split_at(Axis(0), i + 1);
                let src = tail.row(k - i - 1);
                head.row_mut(i).scaled_add(-lki, &src);
            }
        }
        x.row_mut(i).mapv_inplace(|v| v / lii);
    }
    x
}

/// Solves `(L Lᵀ) X = B`.
pub fn chol_solve(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    solve_lower_t(l, solve_lower(l, b).view())
}

pub fn chol_inverse(l: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let inv = chol_solve(l, Array2::eye(n).view());
    symmetrize(inv)
}

pub fn log_det_from_chol(l: ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.abs().ln()).sum::<f64>()
}

pub fn symmetrize(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    a
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: ArrayView2<f64>) -> Array1<f64> {
    let n = a.nrows();
    let mut m = a.to_owned();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off < 1e-30 * (1.0 + m.iter().map(|v| v * v).sum::<f64>()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    m.diag().to_owned()
}
