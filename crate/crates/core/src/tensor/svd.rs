//! Full thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! For `m >= n` the columns of `A` are rotated pairwise until they are
//! mutually orthogonal; the accumulated rotations form `V`, the column norms
//! are the singular values and the normalized columns are `U`. For `m < n`
//! the transpose is factorized and the factors swapped.
//!
//! Conventions applied to every result:
//! - singular values are sorted descending;
//! - values below `1e-12 * σ_max` are set to exactly zero and their left
//!   vectors are replaced by a deterministic orthonormal completion;
//! - the first entry of each `u` column whose magnitude exceeds `1e-10` is
//!   positive (the matching `v` column is flipped with it).

use super::{dot, norm2, Matrix};
use crate::error::{Error, Result};
use std::cell::Cell;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 60;

const RANK_TOL: f64 = 1e-12;
const SIGN_TOL: f64 = 1e-10;

thread_local! {
    static SVD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`svd`] invocations made on the current thread.
pub fn svd_call_count() -> u64 {
    SVD_CALLS.with(Cell::get)
}

/// `a = u · diag(s) · vᵀ` with `u: m×R`, `v: n×R`, `R = min(m, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    /// Full rank `R = min(m, n)`.
    pub fn full_rank(&self) -> usize {
        self.s.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    /// Number of strictly positive singular values.
    pub fn numerical_rank(&self) -> usize {
        self.s.iter().filter(|&&x| x > 0.0).count()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_columns(&self.s).matmul_t(&self.v)
    }
}

pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    SVD_CALLS.with(|c| c.set(c.get() + 1));
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput(format!(
            "svd needs a non-empty matrix, got {m}x{n}"
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput("svd input contains NaN or Inf".into()));
    }
    let mut f = if m >= n {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_signs(&mut f);
    Ok(f)
}

/// One-sided Jacobi for `m >= n`.
fn jacobi_tall(a: &Matrix) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * m as f64;
    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let mut order: Vec<(f64, usize)> = cols.iter().map(|c| norm2(c)).zip(0..n).collect();
    // Stable sort keeps column order for exact ties.
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let s_max = order[0].0;
    let cutoff = RANK_TOL * s_max;

    let mut s = Vec::with_capacity(n);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    let mut v = Matrix::zeros(n, n);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        for (i, &x) in vcols[j].iter().enumerate() {
            v.set(i, k, x);
        }
        if sigma > cutoff && sigma > 0.0 {
            s.push(sigma);
            ucols.push(cols[j].iter().map(|x| x / sigma).collect());
        } else {
            s.push(0.0);
            ucols.push(vec![0.0; m]);
            pending.push(k);
        }
    }
    complete_basis(&mut ucols, &pending, m);

    let mut u = Matrix::zeros(m, n);
    for (k, c) in ucols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            u.set(i, k, x);
        }
    }
    Ok(SvdFactors { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fill the columns listed in `pending` with unit vectors orthogonal to every
/// other column, trying standard basis vectors in order.
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize], m: usize) {
    let mut candidate = 0;
    for &k in pending {
        loop {
            assert!(
                candidate < m,
                "orthonormal completion ran out of candidates"
            );
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || (pending.contains(&j) && norm2(c) == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (x, y) in e.iter_mut().zip(c) {
                        *x -= proj * y;
                    }
                }
            }
            let nrm = norm2(&e);
            if nrm > 1e-6 {
                cols[k] = e.iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

fn fix_signs(f: &mut SvdFactors) {
    let (m, n) = (f.u.rows(), f.v.rows());
    for k in 0..f.s.len() {
        let lead = (0..m).map(|i| f.u.get(i, k)).find(|x| x.abs() > SIGN_TOL);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..m {
                f.u.set(i, k, -f.u.get(i, k));
            }
            for i in 0..n {
                f.v.set(i, k, -f.v.get(i, k));
            }
        }
    }
}

/// Rank-`r` truncation `Σ_{i<r} σ_i u_i v_iᵀ`.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<Matrix> {
    let max = f.full_rank();
    if r == 0 || r > max {
        return Err(Error::InvalidRank { rank: r, max });
    }
    let u = f.u.columns(0..r).scale_columns(&f.s[..r]);
    Ok(u.matmul_t(&f.v.columns(0..r)))
}
