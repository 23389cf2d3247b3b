use super::forward::{cross_entropy, forward_with, full_exec_weights, lowrank_weights_from};
use super::{Activation, BnMode, ForwardTrace, NetworkModel, Pool, BN_EPS};
use crate::error::{Error, Result};
use crate::svd_grad::{lowrank_backward, rebalance_lambda, ClipConfig};
use crate::tensor::{col2im, Matrix, SvdFactors};

/// Gradients for one layer, weight in stored layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    /// Blocks in the same order as [`NetworkModel::block_slices`].
    pub fn block_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.data());
            for v in [&l.bias, &l.gamma, &l.beta].into_iter().flatten() {
                out.push(v);
            }
        }
        out
    }

    pub fn weight_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| l.weight.frobenius_norm())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointOptions {
    /// Weight of the low-rank loss, in `[0, 1]`.
    pub lambda: f64,
    /// Strength of the `½ Σ ‖W‖_F²` penalty.
    pub eta: f64,
    pub clip: ClipConfig,
    /// Rescale `λ` per layer so both weight gradients have equal norm.
    pub rebalance: bool,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            eta: 5e-4,
            clip: ClipConfig::default(),
            rebalance: true,
        }
    }
}

impl JointOptions {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidInput(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::InvalidInput(format!(
                "eta must be a finite non-negative number, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLoss {
    /// `(1−λ)·L_full + λ·L_low + η·½Σ‖W‖²`
    pub total: f64,
    pub full: f64,
    /// `None` when `λ = 0` and the low-rank network was not evaluated.
    pub low: Option<f64>,
}

/// Cross-entropy and its gradients for the full-rank network, batch-norm in
/// batch mode, no weight penalty.
pub fn full_loss_and_grads(
    model: &NetworkModel,
    batch: &Matrix,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    let exec = full_exec_weights(model)?;
    let trace = forward_with(model, &exec, batch, BnMode::Batch)?;
    let (loss, mut grads) = backprop(model, &exec, &trace, labels, true)?;
    for (spec, g) in model.layers().iter().zip(grads.layers.iter_mut()) {
        g.weight = spec.to_stored(&g.weight)?;
    }
    Ok((loss, grads))
}

pub fn joint_loss_and_grads(
    model: &NetworkModel,
    ranks: &[usize],
    batch: &Matrix,
    labels: &[usize],
    opts: JointOptions,
) -> Result<(JointLoss, Gradients)> {
    joint_loss_and_grads_with(model, None, ranks, batch, labels, opts)
}

/// [`joint_loss_and_grads`] reusing precomputed [`NetworkModel::spectra`].
/// With `λ = 0` no SVD is computed at all.
pub fn joint_loss_and_grads_with(
    model: &NetworkModel,
    spectra: Option<&[SvdFactors]>,
    ranks: &[usize],
    batch: &Matrix,
    labels: &[usize],
    opts: JointOptions,
) -> Result<(JointLoss, Gradients)> {
    opts.validate()?;
    let lambda = opts.lambda;
    let penalty = opts.eta * model.weight_penalty();
    let (full, mut grads) = full_loss_and_grads(model, batch, labels)?;

    if lambda == 0.0 {
        for (g, w) in grads.layers.iter_mut().zip(&model.weights) {
            g.weight.axpy(opts.eta, w);
        }
        let total = full + penalty;
        check_finite(total)?;
        return Ok((
            JointLoss {
                total,
                full,
                low: None,
            },
            grads,
        ));
    }

    let owned;
    let spectra = match spectra {
        Some(s) => s,
        None => {
            owned = model.spectra()?;
            &owned
        }
    };
    let low_w = lowrank_weights_from(model, spectra, ranks)?;
    let trace = forward_with(model, &low_w.exec, batch, BnMode::Batch)?;
    let (low, low_grads) = backprop(model, &low_w.exec, &trace, labels, true)?;

    for (i, ((g, lg), spec)) in grads
        .layers
        .iter_mut()
        .zip(low_grads.layers)
        .zip(model.layers())
        .enumerate()
    {
        let grad_wtilde = spec.to_stored(&lg.weight)?;
        let through = lowrank_backward(&low_w.workspaces[i], &grad_wtilde, opts.clip)
            .map_err(|e| e.in_layer(i))?;
        let lam_w = if opts.rebalance {
            rebalance_lambda(lambda, g.weight.frobenius_norm(), through.frobenius_norm())?
        } else {
            lambda
        };
        let mut w_grad = g.weight.scale(1.0 - lambda);
        w_grad.axpy(lam_w, &through);
        w_grad.axpy(opts.eta, &model.weights[i]);
        if !w_grad.is_finite() {
            return Err(Error::Numerical("non-finite weight gradient".into()).in_layer(i));
        }
        g.weight = w_grad;
        for (a, b) in [
            (&mut g.bias, &lg.bias),
            (&mut g.gamma, &lg.gamma),
            (&mut g.beta, &lg.beta),
        ] {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = (1.0 - lambda) * *x + lambda * y;
                }
            }
        }
    }
    let total = (1.0 - lambda) * full + lambda * low + penalty;
    check_finite(total)?;
    Ok((
        JointLoss {
            total,
            full,
            low: Some(low),
        },
        grads,
    ))
}

fn check_finite(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite loss {loss}")))
    }
}

/// Mean cross-entropy and its gradients; weight gradients in execution layout.
pub(crate) fn backprop(
    model: &NetworkModel,
    exec: &[Matrix],
    trace: &ForwardTrace,
    labels: &[usize],
    batch_bn: bool,
) -> Result<(f64, Gradients)> {
    let loss = cross_entropy(&trace.logits, labels)?;
    let n = trace.logits.rows();
    let mut d_out = trace.probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        d_out.row_mut(r)[y] -= 1.0;
    }
    d_out = d_out.scale(1.0 / n as f64);

    let mut layers = Vec::with_capacity(model.num_layers());
    for (i, spec) in model.layers().iter().enumerate().rev() {
        let lt = &trace.layers[i];
        let c = spec.channels();
        let rows = lt.linear.rows();

        let d_act = match spec.pool() {
            Pool::None => d_out.clone().reshape(rows, c),
            pool => {
                let (oh, ow) = spec.output_hw();
                pool_backward(&d_out, lt.pool_argmax.as_deref(), n, oh, ow, c, pool)
            }
        };
        let d_pre = match spec.activation {
            Activation::Relu => d_act.hadamard(&lt.pre_activation.map(|v| f64::from(v > 0.0))),
            Activation::Identity | Activation::Softmax => d_act,
        };

        let theta = &model.theta[i];
        let (d_lin, gamma_g, beta_g) = if spec.has_batchnorm {
            let xhat = lt.normalized.as_ref().expect("batch-norm trace");
            let var = lt.bn_var.as_ref().expect("batch-norm trace");
            let gamma = theta.gamma.as_ref().expect("batch-norm gamma");
            let gamma_g = column_sums(&d_pre.hadamard(xhat));
            let beta_g = column_sums(&d_pre);
            let dxhat = d_pre.scale_columns(gamma);
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let d_lin = if batch_bn {
                let m = rows as f64;
                let mean_d: Vec<f64> = column_sums(&dxhat).iter().map(|v| v / m).collect();
                let mean_dx: Vec<f64> = column_sums(&dxhat.hadamard(xhat))
                    .iter()
                    .map(|v| v / m)
                    .collect();
                let mut d = dxhat.clone();
                for r in 0..rows {
                    let xr = xhat.row(r);
                    for (j, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = inv[j] * (*v - mean_d[j] - xr[j] * mean_dx[j]);
                    }
                }
                d
            } else {
                dxhat.scale_columns(&inv)
            };
            (d_lin, Some(gamma_g), Some(beta_g))
        } else {
            (d_pre, None, None)
        };

        let bias_g = theta.bias.as_ref().map(|_| column_sums(&d_lin));
        let lhs = lt.patches.as_ref().unwrap_or(&lt.input);
        let weight_g = lhs.t_matmul(&d_lin);

        if i > 0 {
            let d_lhs = d_lin.matmul_t(&exec[i]);
            d_out = match spec.geometry() {
                None => d_lhs,
                Some(g) => {
                    let p = g.positions();
                    let mut d_in = Matrix::zeros(n, g.input_len());
                    for s in 0..n {
                        let block = Matrix::from_vec(
                            p,
                            g.kernel.patch_len(),
                            d_lhs.data()
                                [s * p * g.kernel.patch_len()..(s + 1) * p * g.kernel.patch_len()]
                                .to_vec(),
                        )?;
                        d_in.row_mut(s).copy_from_slice(&col2im(&block, &g));
                    }
                    d_in
                }
            };
        }
        layers.push(LayerGrads {
            weight: weight_g,
            bias: bias_g,
            gamma: gamma_g,
            beta: beta_g,
        });
    }
    layers.reverse();
    Ok((loss, Gradients { layers }))
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (a, v) in out.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
    out
}

fn pool_backward(
    d_out: &Matrix,
    argmax: Option<&[usize]>,
    n: usize,
    oh: usize,
    ow: usize,
    c: usize,
    pool: Pool,
) -> Matrix {
    let (ph, pw) = (oh / 2, ow / 2);
    let mut d = Matrix::zeros(n * oh * ow, c);
    let data = d.data_mut();
    for s in 0..n {
        let base = s * oh * ow * c;
        let row = d_out.row(s);
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    let o = (py * pw + px) * c + ch;
                    let g = row[o];
                    match pool {
                        Pool::Avg2 => {
                            for (y, x) in [
                                (2 * py, 2 * px),
                                (2 * py, 2 * px + 1),
                                (2 * py + 1, 2 * px),
                                (2 * py + 1, 2 * px + 1),
                            ] {
                                data[base + (y * ow + x) * c + ch] += 0.25 * g;
                            }
                        }
                        _ => {
                            let k = argmax.expect("max-pool trace")[s * ph * pw * c + o];
                            data[k] += g;
                        }
                    }
                }
            }
        }
    }
    d
}
