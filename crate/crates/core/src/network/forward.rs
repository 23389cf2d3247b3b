use super::{Activation, BnStats, NetworkModel, Pool, BN_EPS};
use crate::error::{Error, Result};
use crate::svd_grad::{lowrank_forward_with, SvdGradWorkspace};
use crate::tensor::{im2col, Matrix, SvdFactors};

/// Source of batch-norm statistics for a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the batch itself (training).
    Batch,
    /// Normalize with precomputed per-layer statistics (inference).
    Running(&'a [Option<BnStats>]),
}

/// Intermediate values of one layer for a batch of `N` samples.
///
/// Row-indexed matrices marked `(N·P) × C` hold one row per sample and output
/// position (`P = 1` for dense layers); the rows of sample `n` are
/// `n·P .. (n+1)·P`.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// `x_ℓ`, `N × input_len`.
    pub input: Matrix,
    /// im2col patches for convolutions, `(N·P) × patch_len`.
    pub patches: Option<Matrix>,
    /// `W x + b`, `(N·P) × C`.
    pub linear: Matrix,
    pub bn_mean: Option<Vec<f64>>,
    pub bn_var: Option<Vec<f64>>,
    pub normalized: Option<Matrix>,
    /// `y_ℓ`: value entering the activation, `(N·P) × C`.
    pub pre_activation: Matrix,
    pub activated: Matrix,
    pub pool_argmax: Option<Vec<usize>>,
    /// `N × output_len`.
    pub output: Matrix,
}

impl LayerTrace {
    /// Positions per sample.
    pub fn positions(&self) -> usize {
        self.linear.rows() / self.input.rows()
    }

    /// Pre-activation of sample `n` flattened as `[position][channel]`.
    pub fn sample_pre_activation(&self, n: usize) -> &[f64] {
        let len = self.positions() * self.pre_activation.cols();
        &self.pre_activation.data()[n * len..(n + 1) * len]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Final layer output, `N × K`.
    pub logits: Matrix,
    /// Row-wise softmax of the logits.
    pub probs: Matrix,
}

/// Truncated weights for one rank assignment, with the SVD blocks kept for
/// the backward pass.
#[derive(Clone, Debug)]
pub struct LowRankWeights {
    /// Truncated weights in stored layout.
    pub stored: Vec<Matrix>,
    /// Truncated weights in channel-wise execution layout.
    pub exec: Vec<Matrix>,
    pub workspaces: Vec<SvdGradWorkspace>,
}

pub fn lowrank_weights(model: &NetworkModel, ranks: &[usize]) -> Result<LowRankWeights> {
    let spectra = model.spectra()?;
    lowrank_weights_from(model, &spectra, ranks)
}

/// Truncations from precomputed [`NetworkModel::spectra`].
pub fn lowrank_weights_from(
    model: &NetworkModel,
    spectra: &[SvdFactors],
    ranks: &[usize],
) -> Result<LowRankWeights> {
    model.check_ranks(ranks)?;
    let mut out = LowRankWeights {
        stored: Vec::with_capacity(ranks.len()),
        exec: Vec::with_capacity(ranks.len()),
        workspaces: Vec::with_capacity(ranks.len()),
    };
    for (i, ((spec, w), (&r, f))) in model
        .layers()
        .iter()
        .zip(&model.weights)
        .zip(ranks.iter().zip(spectra))
        .enumerate()
    {
        let (wt, ws) =
            lowrank_forward_with(f, r, w.rows() < w.cols()).map_err(|e| e.in_layer(i))?;
        out.exec.push(spec.to_exec(&wt)?);
        out.stored.push(wt);
        out.workspaces.push(ws);
    }
    Ok(out)
}

pub(crate) fn full_exec_weights(model: &NetworkModel) -> Result<Vec<Matrix>> {
    model
        .layers()
        .iter()
        .zip(&model.weights)
        .map(|(s, w)| s.to_exec(w))
        .collect()
}

pub fn forward_full(model: &NetworkModel, batch: &Matrix, bn: BnMode) -> Result<ForwardTrace> {
    forward_with(model, &full_exec_weights(model)?, batch, bn)
}

/// Forward pass with every `W_ℓ` replaced by its rank-`r_ℓ` truncation; Θ is
/// read from the same storage as [`forward_full`].
pub fn forward_lowrank(
    model: &NetworkModel,
    ranks: &[usize],
    batch: &Matrix,
    bn: BnMode,
) -> Result<ForwardTrace> {
    let low = lowrank_weights(model, ranks)?;
    forward_with(model, &low.exec, batch, bn)
}

/// Forward pass with explicit execution-layout weights.
pub fn forward_with(
    model: &NetworkModel,
    exec: &[Matrix],
    batch: &Matrix,
    bn: BnMode,
) -> Result<ForwardTrace> {
    if batch.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch.cols() != model.input_len() {
        return Err(Error::InvalidInput(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            model.input_len()
        )));
    }
    if exec.len() != model.num_layers() {
        return Err(Error::InvalidInput(format!(
            "{} weight matrices for {} layers",
            exec.len(),
            model.num_layers()
        )));
    }
    let n = batch.rows();
    let mut layers = Vec::with_capacity(model.num_layers());
    let mut x = batch.clone();
    for (i, (spec, w)) in model.layers().iter().zip(exec).enumerate() {
        if w.shape() != spec.exec_shape() {
            return Err(Error::InvalidInput(format!(
                "layer {i}: execution weight {:?}, expected {:?}",
                w.shape(),
                spec.exec_shape()
            )));
        }
        let theta = &model.theta[i];
        let patches = spec.geometry().map(|g| {
            let p = g.positions();
            let mut all = Matrix::zeros(n * p, g.kernel.patch_len());
            for s in 0..n {
                let cols = im2col(x.row(s), &g);
                let len = cols.data().len();
                all.data_mut()[s * len..(s + 1) * len].copy_from_slice(cols.data());
            }
            all
        });
        let mut linear = patches.as_ref().unwrap_or(&x).matmul(w);
        if let Some(b) = &theta.bias {
            for r in 0..linear.rows() {
                for (v, bv) in linear.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }

        let (mut bn_mean, mut bn_var, mut normalized) = (None, None, None);
        let pre_activation = if spec.has_batchnorm {
            let (mean, var) = match bn {
                BnMode::Batch => column_moments(&linear),
                BnMode::Running(stats) => {
                    let s = stats.get(i).and_then(Option::as_ref).ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "layer {i}: no batch-norm statistics; recalibrate first"
                        ))
                    })?;
                    (s.mean.clone(), s.var.clone())
                }
            };
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = linear.clone();
            for r in 0..xhat.rows() {
                for ((v, m), s) in xhat.row_mut(r).iter_mut().zip(&mean).zip(&inv) {
                    *v = (*v - m) * s;
                }
            }
            let gamma = theta.gamma.as_ref().expect("batch-norm layer has gamma");
            let beta = theta.beta.as_ref().expect("batch-norm layer has beta");
            let mut y = xhat.clone();
            for r in 0..y.rows() {
                for ((v, g), b) in y.row_mut(r).iter_mut().zip(gamma).zip(beta) {
                    *v = *v * g + b;
                }
            }
            bn_mean = Some(mean);
            bn_var = Some(var);
            normalized = Some(xhat);
            y
        } else {
            linear.clone()
        };

        let activated = match spec.activation {
            Activation::Relu => pre_activation.map(|v| v.max(0.0)),
            Activation::Identity | Activation::Softmax => pre_activation.clone(),
        };

        let (output, pool_argmax) = match spec.pool() {
            Pool::None => {
                let len = spec.output_len();
                (activated.clone().reshape(n, len), None)
            }
            pool => {
                let (oh, ow) = spec.output_hw();
                let (out, idx) = pool_forward(&activated, n, oh, ow, spec.channels(), pool);
                (out, idx)
            }
        };

        layers.push(LayerTrace {
            input: x,
            patches,
            linear,
            bn_mean,
            bn_var,
            normalized,
            pre_activation,
            activated,
            pool_argmax,
            output: output.clone(),
        });
        x = output;
    }
    let probs = softmax_rows(&x);
    Ok(ForwardTrace {
        layers,
        logits: x,
        probs,
    })
}

/// Per-column mean and population variance.
fn column_moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let rows = m.rows() as f64;
    let mut mean = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (a, v) in mean.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= rows);
    let mut var = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for ((a, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|a| *a /= rows);
    (mean, var)
}

/// 2×2 stride-2 pooling over per-sample `[oh][ow][c]` grids.
fn pool_forward(
    act: &Matrix,
    n: usize,
    oh: usize,
    ow: usize,
    c: usize,
    pool: Pool,
) -> (Matrix, Option<Vec<usize>>) {
    let (ph, pw) = (oh / 2, ow / 2);
    let mut out = Matrix::zeros(n, ph * pw * c);
    let mut argmax = (pool == Pool::Max2).then(|| vec![0usize; n * ph * pw * c]);
    let data = act.data();
    for s in 0..n {
        let base = s * oh * ow * c;
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    let idx = [
                        (2 * py, 2 * px),
                        (2 * py, 2 * px + 1),
                        (2 * py + 1, 2 * px),
                        (2 * py + 1, 2 * px + 1),
                    ]
                    .map(|(y, x)| base + (y * ow + x) * c + ch);
                    let o = (py * pw + px) * c + ch;
                    let v = match pool {
                        Pool::Avg2 => idx.iter().map(|&k| data[k]).sum::<f64>() * 0.25,
                        _ => {
                            let best = idx
                                .iter()
                                .copied()
                                .reduce(|a, b| if data[b] > data[a] { b } else { a })
                                .unwrap();
                            argmax.as_mut().unwrap()[s * ph * pw * c + o] = best;
                            data[best]
                        }
                    };
                    out.row_mut(s)[o] = v;
                }
            }
        }
    }
    (out, argmax)
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Mean cross-entropy of softmax(logits) against integer labels.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} samples",
            labels.len(),
            logits.rows()
        )));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        if y >= row.len() {
            return Err(Error::InvalidInput(format!(
                "label {y} out of range for {} classes",
                row.len()
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Population batch-norm statistics from one pass over `data` at the given
/// ranks (`None` for full rank). γ and β are not touched.
pub fn recalibrate_bn(
    model: &NetworkModel,
    ranks: Option<&[usize]>,
    data: &Matrix,
) -> Result<Vec<Option<BnStats>>> {
    if data.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if !model.has_batchnorm() {
        return Err(Error::UnsupportedModel(
            "model has no batch-norm layers to recalibrate".into(),
        ));
    }
    // Normalizing with whole-dataset batch statistics makes every layer's
    // batch moments equal to the population moments of the recalibrated net.
    let trace = match ranks {
        Some(r) => forward_lowrank(model, r, data, BnMode::Batch)?,
        None => forward_full(model, data, BnMode::Batch)?,
    };
    Ok(trace
        .layers
        .into_iter()
        .map(|l| match (l.bn_mean, l.bn_var) {
            (Some(mean), Some(var)) => Some(BnStats { mean, var }),
            _ => None,
        })
        .collect())
}
