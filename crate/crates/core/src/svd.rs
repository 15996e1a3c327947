//! Singular value decomposition via one-sided Jacobi rotations.
//!
//! Matrices in this crate are at most batch x width, so a plain Hestenes
//! sweep over column pairs is fast enough and gives U and V directly,
//! which the graph needs for singular-value gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sweep cap before the decomposition is declared non-convergent.
pub const MAX_SWEEPS: usize = 100;
/// Relative off-diagonal tolerance for column orthogonality.
pub const ORTHO_TOL: f64 = 1e-12;
/// Singular values closer than this are treated as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-9;

/// Thin SVD: `a = u * diag(s) * v^T` with `u` m x k, `v` n x k, k = min(m, n).
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        let t = svd_tall(&a.transpose())?;
        Ok(Svd { u: t.v, s: t.s, v: t.u })
    }
}

/// One-sided Jacobi for m >= n: rotate column pairs of a working copy of A
/// until all pairs are orthogonal; singular values are the column norms.
fn svd_tall(a: &Tensor) -> Result<Svd> {
    let (m, n) = a.shape();
    // Column-major working copies.
    let mut w: Vec<Vec<f64>> = (0..n).map(|c| (0..m).map(|r| a.get(r, c)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged && n >= 2 {
            break;
        }
        converged = true;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(x, y)| x * y).sum();
                if alpha * beta == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (wp, wq) = (w[p][r], w[q][r]);
                    w[p][r] = c * wp - s * wq;
                    w[q][r] = s * wp + c * wq;
                }
                for r in 0..n {
                    let (vp, vq) = (v[p][r], v[q][r]);
                    v[p][r] = c * vp - s * vq;
                    v[q][r] = s * vp + c * vq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::numeric(
            "svd",
            format!("one-sided Jacobi did not converge within {MAX_SWEEPS} sweeps"),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = w.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Tensor::zeros(m, n);
    let mut vt = Tensor::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &c) in order.iter().enumerate() {
        let sigma = norms[c];
        s.push(sigma);
        if sigma > 0.0 {
            for r in 0..m {
                u.set(r, k, w[c][r] / sigma);
            }
        }
        // Zero singular value: leave the u column at zero. Gradients through
        // it vanish, which is the subgradient at a rank-deficient point.
        for r in 0..n {
            vt.set(r, k, v[c][r]);
        }
    }
    for k in 1..s.len() {
        if (s[k - 1] - s[k]).abs() < DEGENERACY_GAP {
            log::warn!(
                "near-degenerate singular values sigma[{}]={} sigma[{}]={}",
                k - 1,
                s[k - 1],
                k,
                s[k]
            );
        }
    }
    Ok(Svd { u, s, v: vt })
}
