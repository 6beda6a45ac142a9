//! Dense decompositions: thin SVD (one-sided Jacobi), Moore-Penrose
//! pseudoinverse, minimum-norm least squares, rank and conditioning.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `A = U diag(s) Vt` with `r = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdResult<S> {
    /// `m x r`, orthonormal columns.
    pub u: Tensor<S>,
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<S>,
    /// `r x n`, orthonormal rows.
    pub vt: Tensor<S>,
}

impl<S: Scalar> SvdResult<S> {
    pub fn reconstruct(&self) -> Tensor<S> {
        let r = self.singular_values.len();
        let m = self.u.rows();
        let us = Tensor::from_fn(m, r, |i, k| self.u.at(i, k) * self.singular_values[k]);
        us.matmul(&self.vt).expect("conforming factors")
    }

    pub fn max_singular_value(&self) -> S {
        self.singular_values.first().copied().unwrap_or_else(S::zero)
    }
}

fn default_rtol<S: Scalar>(m: usize, n: usize) -> S {
    S::lit(m.max(n) as f64) * S::epsilon()
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Thin SVD of an `m x n` matrix.
pub fn svd<S: Scalar>(a: &Tensor<S>) -> Result<SvdResult<S>> {
    let (m, n) = a.require_matrix("svd")?;
    if !a.all_finite() {
        return Err(Error::NonFinite { op: "svd" });
    }
    if m < n {
        let t = svd(&a.transpose()?)?;
        return Ok(SvdResult {
            u: t.vt.transpose()?,
            singular_values: t.singular_values,
            vt: t.u.transpose()?,
        });
    }

    // Column-major working copies: cols[j] is column j of A, v[j] of V.
    let mut cols: Vec<Vec<S>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut v: Vec<Vec<S>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { S::one() } else { S::zero() }).collect())
        .collect();
    let eps = S::epsilon();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == S::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (S::one() + zeta * zeta).sqrt());
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let (x, y) = (cols[i][k], cols[j][k]);
                    cols[i][k] = c * x - s * y;
                    cols[j][k] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (v[i][k], v[j][k]);
                    v[i][k] = c * x - s * y;
                    v[j][k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            rows: m,
            cols: n,
            norm: a.frobenius_norm().to_f64_lossy(),
        });
    }

    let norms: Vec<S> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap_or(std::cmp::Ordering::Equal).then(x.cmp(&y)));

    let sigma_max = norms[order[0]];
    let floor = sigma_max * eps * S::lit(m as f64);
    let mut u_cols: Vec<Vec<S>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &k) in order.iter().enumerate() {
        if norms[k] > floor && norms[k] > S::zero() {
            u_cols.push(cols[k].iter().map(|&x| x / norms[k]).collect());
        } else {
            u_cols.push(vec![S::zero(); m]);
            pending.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &pending, m);

    let singular_values: Vec<S> = order.iter().map(|&k| norms[k]).collect();
    let u = Tensor::from_fn(m, n, |i, k| u_cols[k][i]);
    let vt = Tensor::from_fn(n, n, |k, j| v[order[k]][j]);
    Ok(SvdResult {
        u,
        singular_values,
        vt,
    })
}

/// Fills the `pending` slots of `basis` with unit vectors orthogonal to every
/// other slot, drawing candidates from the standard basis.
fn complete_orthonormal<S: Scalar>(basis: &mut [Vec<S>], pending: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in pending {
        while candidate < m {
            let mut w = vec![S::zero(); m];
            w[candidate] = S::one();
            candidate += 1;
            for _ in 0..2 {
                for (k, b) in basis.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let p = dot(&w, b);
                    for (wi, &bi) in w.iter_mut().zip(b) {
                        *wi -= p * bi;
                    }
                }
            }
            let norm = dot(&w, &w).sqrt();
            if norm > S::lit(0.5) {
                basis[slot] = w.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Moore-Penrose pseudoinverse. Singular values below `rtol * sigma_max` are
/// treated as zero; `rtol` defaults to `max(m, n) * eps`.
pub fn pinv<S: Scalar>(a: &Tensor<S>, rtol: Option<S>) -> Result<Tensor<S>> {
    let (m, n) = a.require_matrix("pinv")?;
    let f = svd(a)?;
    let cutoff = rtol.unwrap_or_else(|| default_rtol(m, n)) * f.max_singular_value();
    Ok(pinv_from_svd(&f, cutoff, m, n))
}

fn pinv_from_svd<S: Scalar>(f: &SvdResult<S>, cutoff: S, m: usize, n: usize) -> Tensor<S> {
    let r = f.singular_values.len();
    let inv: Vec<S> = f
        .singular_values
        .iter()
        .map(|&s| if s >= cutoff && s > S::zero() { S::one() / s } else { S::zero() })
        .collect();
    let mut out = Tensor::zeros(&[n, m]);
    for k in 0..r {
        if inv[k] == S::zero() {
            continue;
        }
        for i in 0..n {
            let vik = f.vt.at(k, i) * inv[k];
            for j in 0..m {
                let cur = out.at(i, j);
                out.set(i, j, cur + vik * f.u.at(j, k));
            }
        }
    }
    out
}

/// Minimum-norm least-squares solution of `A X = B`.
#[derive(Clone, Debug)]
pub struct LstsqSolution<S> {
    pub x: Tensor<S>,
    /// `||A X - B||_F`.
    pub residual: S,
    pub rank: usize,
    pub condition: S,
}

pub fn lstsq<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, rtol: Option<S>) -> Result<LstsqSolution<S>> {
    let (m, n) = a.require_matrix("lstsq")?;
    let (mb, _) = b.require_matrix("lstsq")?;
    if m != mb {
        return Err(Error::shape("lstsq", format!("A has {m} rows, B has {mb}")));
    }
    let f = svd(a)?;
    let rtol = rtol.unwrap_or_else(|| default_rtol(m, n));
    let cutoff = rtol * f.max_singular_value();
    let (rank, condition) = rank_cond_from_values(&f.singular_values, cutoff);
    let x = pinv_from_svd(&f, cutoff, m, n).matmul(b)?;
    let residual = a.matmul(&x)?.sub(b)?.frobenius_norm();
    Ok(LstsqSolution {
        x,
        residual,
        rank,
        condition,
    })
}

fn rank_cond_from_values<S: Scalar>(values: &[S], cutoff: S) -> (usize, S) {
    let kept: Vec<S> = values
        .iter()
        .copied()
        .filter(|&s| s >= cutoff && s > S::zero())
        .collect();
    match (kept.first(), kept.last()) {
        (Some(&hi), Some(&lo)) => (kept.len(), hi / lo),
        _ => (0, S::infinity()),
    }
}

/// Numerical rank and condition number (ratio of the extreme retained
/// singular values). A zero matrix has rank 0 and infinite condition.
pub fn rank_and_cond<S: Scalar>(a: &Tensor<S>, rtol: Option<S>) -> Result<(usize, S)> {
    let (m, n) = a.require_matrix("rank_and_cond")?;
    let f = svd(a)?;
    let cutoff = rtol.unwrap_or_else(|| default_rtol(m, n)) * f.max_singular_value();
    Ok(rank_cond_from_values(&f.singular_values, cutoff))
}
