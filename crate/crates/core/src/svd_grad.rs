//! Truncated-SVD weights and the exact gradient through the truncation.
//!
//! For `W = U S Vᵀ` (thin, `m >= n`) split into kept blocks `Ũ, S̃, Ṽ` (top
//! `r` triples) and dropped blocks `Ū, S̄, V̄`, the gradient of a loss with
//! respect to `W` given `∇̃ = ∂L/∂W̃` is
//!
//! ```text
//! ∇ = ∇̃ṼṼᵀ + Ũ(F₁∘A + F₂∘B)V̄ᵀ + Ū(F₃∘A + F₁∘B)ᵀṼᵀ
//! A = Ṽᵀ∇̃ᵀŪ,  B = Ũᵀ∇̃V̄                       (both r × (R−r))
//! F₁ = ρ/(1−ρ²), F₂ = 1/(1−ρ²), F₃ = ρ²/(1−ρ²),  ρ_ij = σ_{r+j}/σ_i
//! ```
//!
//! The coefficients only depend on singular-value ratios, so bounding them by
//! clipping `ρ ← min(ρ, δ)` does not depend on the scale of `W`. Wide
//! matrices (`m < n`) are handled by transposing.

use crate::error::{Error, Result};
use crate::tensor::{svd, Matrix, SvdFactors};
use serde::{Deserialize, Serialize};

/// Upper bound applied to the singular-value ratios in the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    delta: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            delta: 0.99f64.sqrt(),
        }
    }
}

impl ClipConfig {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidInput(format!(
                "clip delta must lie in (0, 1), got {delta}"
            )));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Everything the backward pass needs from one truncated factorization.
///
/// All blocks refer to the tall orientation (`m >= n`); `transposed` records
/// whether the layer weight itself is wide.
#[derive(Clone, Debug)]
pub struct SvdGradWorkspace {
    pub transposed: bool,
    pub rank: usize,
    pub u_kept: Matrix,
    pub u_dropped: Matrix,
    pub s_kept: Vec<f64>,
    pub s_dropped: Vec<f64>,
    pub v_kept: Matrix,
    pub v_dropped: Matrix,
    /// `ρ_ij = σ_{r+j} / σ_i`, unclipped, `r × (R − r)`.
    pub rho: Matrix,
}

impl SvdGradWorkspace {
    /// Shape of the original (untransposed) weight.
    pub fn weight_shape(&self) -> (usize, usize) {
        let (m, n) = (self.u_kept.rows(), self.v_kept.rows());
        if self.transposed {
            (n, m)
        } else {
            (m, n)
        }
    }

    /// Cross terms `A = Ṽᵀ∇̃ᵀŪ` and `B = Ũᵀ∇̃V̄` for a tall-oriented gradient.
    pub fn cross_terms(&self, grad_tall: &Matrix) -> (Matrix, Matrix) {
        let a = grad_tall.matmul(&self.v_kept).t_matmul(&self.u_dropped);
        let b = self.u_kept.t_matmul(grad_tall).matmul(&self.v_dropped);
        (a, b)
    }
}

pub fn lowrank_forward(w: &Matrix, r: usize) -> Result<(Matrix, SvdGradWorkspace)> {
    let tall = w.rows() >= w.cols();
    let f = if tall { svd(w)? } else { svd(&w.transpose())? };
    lowrank_forward_with(&f, r, !tall)
}

/// Like [`lowrank_forward`] but reusing factors of the tall-oriented weight
/// (`w` itself when `m >= n`, `wᵀ` otherwise).
pub fn lowrank_forward_with(
    tall: &SvdFactors,
    r: usize,
    transposed: bool,
) -> Result<(Matrix, SvdGradWorkspace)> {
    let full = tall.full_rank();
    if r == 0 || r > full {
        return Err(Error::InvalidRank { rank: r, max: full });
    }
    let s_kept = tall.s[..r].to_vec();
    let s_dropped = tall.s[r..].to_vec();
    let rho = Matrix::from_fn(r, full - r, |i, j| ratio(s_dropped[j], s_kept[i]));
    let ws = SvdGradWorkspace {
        transposed,
        rank: r,
        u_kept: tall.u.columns(0..r),
        u_dropped: tall.u.columns(r..full),
        v_kept: tall.v.columns(0..r),
        v_dropped: tall.v.columns(r..full),
        s_kept,
        s_dropped,
        rho,
    };
    let w_tilde = ws.u_kept.scale_columns(&ws.s_kept).matmul_t(&ws.v_kept);
    let w_tilde = if transposed {
        w_tilde.transpose()
    } else {
        w_tilde
    };
    Ok((w_tilde, ws))
}

/// `σ_k / σ_i`; a zero kept value can only be matched by zero dropped values,
/// which are treated as a repeated singular value.
fn ratio(dropped: f64, kept: f64) -> f64 {
    if kept > 0.0 {
        dropped / kept
    } else {
        1.0
    }
}

pub fn clip_rho(rho: &Matrix, clip: ClipConfig) -> Matrix {
    rho.map(|p| p.min(clip.delta))
}

pub fn lowrank_backward(
    ws: &SvdGradWorkspace,
    grad_wtilde: &Matrix,
    clip: ClipConfig,
) -> Result<Matrix> {
    if grad_wtilde.shape() != ws.weight_shape() {
        return Err(Error::InvalidInput(format!(
            "gradient shape {:?} does not match weight shape {:?}",
            grad_wtilde.shape(),
            ws.weight_shape()
        )));
    }
    let g = if ws.transposed {
        grad_wtilde.transpose()
    } else {
        grad_wtilde.clone()
    };

    let mut out = g.matmul(&ws.v_kept).matmul_t(&ws.v_kept);
    if ws.rho.cols() > 0 {
        let rho = clip_rho(&ws.rho, clip);
        let f1 = rho.map(|p| p / (1.0 - p * p));
        let f2 = rho.map(|p| 1.0 / (1.0 - p * p));
        let f3 = rho.map(|p| p * p / (1.0 - p * p));
        let (a, b) = ws.cross_terms(&g);
        let upper = f1.hadamard(&a).add(&f2.hadamard(&b));
        let lower = f3.hadamard(&a).add(&f1.hadamard(&b));
        out = out
            .add(&ws.u_kept.matmul(&upper).matmul_t(&ws.v_dropped))
            .add(&ws.u_dropped.matmul_t(&lower).matmul_t(&ws.v_kept));
    }
    if !out.is_finite() {
        return Err(Error::Numerical(
            "non-finite gradient through truncated SVD".into(),
        ));
    }
    Ok(if ws.transposed { out.transpose() } else { out })
}

/// `λ·‖∇_f‖_F / ‖∇‖_F`; returns `λ` unchanged when the low-rank gradient is zero.
pub fn rebalance_lambda(lambda: f64, grad_full_norm: f64, grad_low_norm: f64) -> Result<f64> {
    if grad_full_norm < 0.0 || grad_low_norm < 0.0 {
        return Err(Error::InvalidInput(format!(
            "gradient norms must be non-negative, got {grad_full_norm} and {grad_low_norm}"
        )));
    }
    if grad_low_norm == 0.0 {
        return Ok(lambda);
    }
    Ok(lambda * grad_full_norm / grad_low_norm)
}
