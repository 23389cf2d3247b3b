//! Numerical checks of the layer-error monotonicity, the KL bound and the
//! Lipschitz study, plus accuracy/size trade-off sweeps. Every report has a
//! CSV writer with a fixed column order.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{
    forward_with, lowrank_weights_from, Activation, BnMode, ForwardTrace, LayerKind, NetworkModel,
};
use crate::rank::{Budget, Criterion, RankSelector};
use crate::tensor::{im2col, svd, truncate, Decomposition, Matrix, SvdFactors};
use crate::train::evaluate;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

/// Probabilities are floored here before taking logs.
pub const KL_FLOOR: f64 = 1e-300;

struct Paired {
    spectra: Vec<SvdFactors>,
    low_exec: Vec<Matrix>,
    full: ForwardTrace,
    low: ForwardTrace,
}

/// Full-rank and low-rank traces on one batch, batch statistics throughout.
fn paired(model: &NetworkModel, ranks: &[usize], batch: &Matrix) -> Result<Paired> {
    if batch.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let spectra = model.spectra()?;
    let low_exec = lowrank_weights_from(model, &spectra, ranks)?.exec;
    let full_exec = lowrank_weights_from(model, &spectra, &model.full_ranks())?.exec;
    let full = forward_with(model, &full_exec, batch, BnMode::Batch)?;
    let low = forward_with(model, &low_exec, batch, BnMode::Batch)?;
    Ok(Paired {
        spectra,
        low_exec,
        full,
        low,
    })
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Right singular vectors of the stored `m × n` weight, as columns of an
/// `n × R` matrix, from a tall-oriented factorization.
fn right_vectors(w: &Matrix, tall: &SvdFactors) -> Matrix {
    if w.rows() >= w.cols() {
        tall.v.clone()
    } else {
        tall.u.clone()
    }
}

fn truncated(w: &Matrix, tall: &SvdFactors, r: usize) -> Result<Matrix> {
    let t = truncate(tall, r)?;
    Ok(if w.rows() >= w.cols() {
        t
    } else {
        t.transpose()
    })
}

/// Squared layer error `‖y − ŷ(r)‖²` against rank for one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerErrorCurve {
    pub layer: usize,
    /// `(r, mean over samples of ‖y − ŷ(r)‖²)` for `r = 1..=R`.
    pub points: Vec<(usize, f64)>,
    /// Largest per-sample increase `E(r+1) − E(r)`; positive means a violation.
    pub max_increase: f64,
    /// Largest per-sample `E(R)`.
    pub final_error: f64,
    /// Largest per-sample `|E(r) − E(r+1) − (v_{r+1}ᵀ y)²|`.
    pub max_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop1Report {
    pub curves: Vec<LayerErrorCurve>,
    /// Spatially decomposed conv layers: their output is not `W̃ᵀx` for the
    /// stored matrix, so the identity does not apply.
    pub skipped: Vec<usize>,
}

impl Prop1Report {
    pub fn max_increase(&self) -> f64 {
        self.curves
            .iter()
            .map(|c| c.max_increase)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_final_error(&self) -> f64 {
        self.curves
            .iter()
            .map(|c| c.final_error)
            .fold(0.0, f64::max)
    }

    pub fn max_residual(&self) -> f64 {
        self.curves
            .iter()
            .map(|c| c.max_residual)
            .fold(0.0, f64::max)
    }

    /// Columns: `layer,rank,mean_sq_error`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record(["layer", "rank", "mean_sq_error"])
            .map_err(csv_err)?;
        for c in &self.curves {
            for &(r, e) in &c.points {
                out.write_record([c.layer.to_string(), r.to_string(), e.to_string()])
                    .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Layer error `‖y_ℓ − W̃_ℓ(r)ᵀ x_ℓ‖²` for every rank, with `x_ℓ` the layer
/// input of the full-rank network on `batch` and `y_ℓ = W_ℓᵀ x_ℓ`. Conv
/// errors are summed over output positions.
pub fn check_prop1(model: &NetworkModel, batch: &Matrix) -> Result<Prop1Report> {
    if batch.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let spectra = model.spectra()?;
    let exec = lowrank_weights_from(model, &spectra, &model.full_ranks())?.exec;
    let trace = forward_with(model, &exec, batch, BnMode::Batch)?;
    let n = batch.rows();
    let mut report = Prop1Report {
        curves: Vec::new(),
        skipped: Vec::new(),
    };
    for (l, spec) in model.layers().iter().enumerate() {
        if spec.decomposition() == Some(Decomposition::Spatial) {
            report.skipped.push(l);
            continue;
        }
        let lt = &trace.layers[l];
        let x = lt.patches.as_ref().unwrap_or(&lt.input);
        let w = &model.weights[l];
        let y = x.matmul(w);
        let rows_per = x.rows() / n;
        let big_r = spec.full_rank();
        let v = right_vectors(w, &spectra[l]);
        let proj = y.matmul(&v); // (N·P) × R, entries v_kᵀ y

        // per-sample errors, errs[r-1][s]
        let mut errs = vec![vec![0.0; n]; big_r];
        for (r, e) in errs.iter_mut().enumerate() {
            let diff = y.sub(&x.matmul(&truncated(w, &spectra[l], r + 1)?));
            for (row, chunk) in diff.data().chunks(diff.cols()).enumerate() {
                e[row / rows_per] += chunk.iter().map(|d| d * d).sum::<f64>();
            }
        }
        let mut sq_proj = vec![vec![0.0; n]; big_r];
        for row in 0..proj.rows() {
            for (k, p) in proj.row(row).iter().enumerate() {
                sq_proj[k][row / rows_per] += p * p;
            }
        }
        let mut curve = LayerErrorCurve {
            layer: l,
            points: errs
                .iter()
                .enumerate()
                .map(|(r, e)| (r + 1, e.iter().sum::<f64>() / n as f64))
                .collect(),
            max_increase: f64::NEG_INFINITY,
            final_error: errs[big_r - 1].iter().copied().fold(0.0, f64::max),
            max_residual: 0.0,
        };
        for r in 0..big_r - 1 {
            for s in 0..n {
                curve.max_increase = curve.max_increase.max(errs[r + 1][s] - errs[r][s]);
                let res = errs[r][s] - errs[r + 1][s] - sq_proj[r + 1][s];
                curve.max_residual = curve.max_residual.max(res.abs());
            }
        }
        if big_r == 1 {
            curve.max_increase = 0.0;
        }
        report.curves.push(curve);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prop2Sample {
    pub kl: f64,
    pub bound: f64,
    /// `bound − kl`
    pub slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop2Report {
    pub ranks: Vec<usize>,
    /// `‖W_ℓ‖₂` of the full-rank weights.
    pub spectral_norms: Vec<f64>,
    pub samples: Vec<Prop2Sample>,
}

impl Prop2Report {
    /// Samples with `kl > bound` beyond rounding (`1e-12` relative).
    pub fn violations(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.kl > s.bound + 1e-12 * s.bound.max(1.0))
            .count()
    }

    pub fn mean_kl(&self) -> f64 {
        self.samples.iter().map(|s| s.kl).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_bound(&self) -> f64 {
        self.samples.iter().map(|s| s.bound).sum::<f64>() / self.samples.len() as f64
    }

    /// Columns: `sample,kl,bound,slack`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record(["sample", "kl", "bound", "slack"])
            .map_err(csv_err)?;
        for (i, s) in self.samples.iter().enumerate() {
            out.write_record([
                i.to_string(),
                s.kl.to_string(),
                s.bound.to_string(),
                s.slack.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Whether the KL bound's hypotheses hold: dense layers only, no bias, no
/// batch-norm, 1-Lipschitz hidden activations.
pub fn prop2_applicable(model: &NetworkModel) -> Result<()> {
    for (i, l) in model.layers().iter().enumerate() {
        let why = if !matches!(l.kind, LayerKind::Dense { .. }) {
            "is not fully connected"
        } else if l.has_bias {
            "has a bias"
        } else if l.has_batchnorm {
            "has batch-norm"
        } else if l.activation == Activation::Softmax && i + 1 != model.num_layers() {
            "applies softmax before the output"
        } else {
            continue;
        };
        return Err(Error::UnsupportedModel(format!(
            "the KL bound needs a bias-free, batch-norm-free dense network; layer {i} {why}"
        )));
    }
    Ok(())
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.max(KL_FLOOR);
            a * (a.ln() - b.max(KL_FLOOR).ln())
        })
        .sum::<f64>()
        .max(0.0)
}

/// Per-sample `KL(p‖p̃)` against
/// `sqrt(2(‖y_L − ŷ_L‖² + Σ_{ℓ<L} ‖y_ℓ − ŷ_ℓ‖² Π_{j>ℓ} ‖W_j‖₂²))`, where
/// `ŷ_ℓ = W̃_ℓᵀ x_ℓ` uses the full-rank input `x_ℓ` and the norms are those of
/// the full-rank weights.
pub fn check_prop2(model: &NetworkModel, ranks: &[usize], batch: &Matrix) -> Result<Prop2Report> {
    prop2_applicable(model)?;
    let Paired {
        spectra,
        low_exec,
        full,
        low: lowt,
    } = paired(model, ranks, batch)?;
    let norms: Vec<f64> = spectra.iter().map(|f| f.s[0]).collect();
    let depth = model.num_layers();
    // tail[ℓ] = Π_{j>ℓ} ‖W_j‖₂²
    let mut tail = vec![1.0; depth];
    for l in (0..depth.saturating_sub(1)).rev() {
        tail[l] = tail[l + 1] * norms[l + 1] * norms[l + 1];
    }
    let layer_err: Vec<Matrix> = (0..depth)
        .map(|l| {
            let lt = &full.layers[l];
            lt.linear.sub(&lt.input.matmul(&low_exec[l]))
        })
        .collect();
    let samples = (0..batch.rows())
        .map(|s| {
            let sum: f64 = (0..depth)
                .map(|l| {
                    let e: f64 = layer_err[l].row(s).iter().map(|d| d * d).sum();
                    e * tail[l]
                })
                .sum();
            let bound = (2.0 * sum).sqrt();
            let kl = kl_divergence(full.probs.row(s), lowt.probs.row(s));
            Prop2Sample {
                kl,
                bound,
                slack: bound - kl,
            }
        })
        .collect();
    Ok(Prop2Report {
        ranks: ranks.to_vec(),
        spectral_norms: norms,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzRow {
    pub layer: usize,
    /// Theoretical per-layer constant.
    pub omega: f64,
    /// Empirical maximum ratio; `None` when every sample was skipped.
    pub omega_hat: Option<f64>,
    /// `Π_{j>ℓ} ω_j`
    pub big_omega: f64,
    /// `Π_{j>ℓ} ω̂_j`
    pub big_omega_hat: Option<f64>,
    /// Samples with a non-zero input perturbation.
    pub samples_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub ranks: Vec<usize>,
    pub rows: Vec<LipschitzRow>,
}

impl LipschitzReport {
    /// Columns: `layer,omega,omega_hat,big_omega,big_omega_hat,samples_used`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record([
            "layer",
            "omega",
            "omega_hat",
            "big_omega",
            "big_omega_hat",
            "samples_used",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                r.layer.to_string(),
                r.omega.to_string(),
                fmt_opt(r.omega_hat),
                r.big_omega.to_string(),
                fmt_opt(r.big_omega_hat),
                r.samples_used.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Number of output patches an input entry can fall into.
fn overlap_factor(model: &NetworkModel, l: usize) -> f64 {
    match model.layers()[l].kind {
        LayerKind::Conv { kernel, .. } => {
            let (kh, kw, s) = (kernel.k_h, kernel.k_w, kernel.stride);
            (kh.div_ceil(s) * kw.div_ceil(s)) as f64
        }
        LayerKind::Dense { .. } => 1.0,
    }
}

/// Apply the layer's linear map `W̃ᵀ` to one sample's flattened input.
fn apply_linear(model: &NetworkModel, l: usize, exec: &Matrix, x: &[f64]) -> Matrix {
    match model.layers()[l].geometry() {
        Some(g) => im2col(x, &g).matmul(exec),
        None => Matrix::from_vec(1, x.len(), x.to_vec())
            .expect("row vector")
            .matmul(exec),
    }
}

fn sample_slice(m: &Matrix, s: usize, n: usize) -> &[f64] {
    let len = m.data().len() / n;
    &m.data()[s * len..(s + 1) * len]
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Theoretical and empirical Lipschitz constants of the low-rank network
/// against the full-rank one. `y_ℓ` is the value entering the activation
/// (after batch-norm); batch-norm uses whole-dataset statistics in both
/// networks.
///
/// `ω_ℓ = ‖W̃_ℓ‖₂·sqrt(⌈k_h/s⌉⌈k_w/s⌉)` with the channel-wise matrix for conv
/// layers, `‖W̃_ℓ‖₂ = ‖W_ℓ‖₂` for dense layers.
#[allow(clippy::needless_range_loop)]
pub fn lipschitz_report(
    model: &NetworkModel,
    ranks: &[usize],
    data: &Matrix,
) -> Result<LipschitzReport> {
    let Paired {
        low_exec,
        full,
        low: lowt,
        ..
    } = paired(model, ranks, data)?;
    let n = data.rows();
    let depth = model.num_layers();

    let mut omega = Vec::with_capacity(depth);
    let mut omega_hat = Vec::with_capacity(depth);
    let mut used = Vec::with_capacity(depth);
    for l in 0..depth {
        let sigma = svd(&low_exec[l]).map_err(|e| e.in_layer(l))?.s[0];
        omega.push(sigma * overlap_factor(model, l).sqrt());
        if l == 0 {
            omega_hat.push(None);
            used.push(0);
            continue;
        }
        let (mut best, mut count) = (None::<f64>, 0usize);
        for s in 0..n {
            let den = norm(
                &sample_slice(&full.layers[l - 1].pre_activation, s, n)
                    .iter()
                    .zip(sample_slice(&lowt.layers[l - 1].pre_activation, s, n))
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            );
            if den == 0.0 {
                continue;
            }
            let dx: Vec<f64> = full.layers[l]
                .input
                .row(s)
                .iter()
                .zip(lowt.layers[l].input.row(s))
                .map(|(a, b)| a - b)
                .collect();
            let num = apply_linear(model, l, &low_exec[l], &dx).frobenius_norm();
            let ratio = num / den;
            best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
            count += 1;
        }
        omega_hat.push(best);
        used.push(count);
    }
    if omega_hat.iter().all(Option::is_none) {
        return Err(Error::DegenerateInput(
            "the low-rank network matches the full network on every sample; \
             no empirical ratio is defined"
                .into(),
        ));
    }
    let rows = (0..depth)
        .map(|l| {
            let big_omega = omega[l + 1..].iter().product();
            let big_omega_hat = omega_hat[l + 1..]
                .iter()
                .try_fold(1.0, |acc, w| w.map(|w| acc * w));
            LipschitzRow {
                layer: l,
                omega: omega[l],
                omega_hat: omega_hat[l],
                big_omega,
                big_omega_hat,
                samples_used: used[l],
            }
        })
        .collect();
    Ok(LipschitzReport {
        ranks: ranks.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub budget: Budget,
    pub criterion: Criterion,
    /// Empty for infeasible rows.
    pub ranks: Vec<usize>,
    pub params: Option<u64>,
    pub macs: Option<u64>,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    /// Mean KL bound; only for models satisfying [`prop2_applicable`].
    pub mean_kl_bound: Option<f64>,
    /// `None` when the row was evaluated, otherwise why not.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffReport {
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffReport {
    /// Columns:
    /// `budget,criterion,ranks,params,macs,loss,accuracy,mean_kl_bound,status`;
    /// ranks are `;`-separated.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record([
            "budget",
            "criterion",
            "ranks",
            "params",
            "macs",
            "loss",
            "accuracy",
            "mean_kl_bound",
            "status",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            let ranks: Vec<String> = r.ranks.iter().map(usize::to_string).collect();
            out.write_record([
                r.budget.to_string(),
                r.criterion.to_string(),
                ranks.join(";"),
                r.params.map_or_else(String::new, |v| v.to_string()),
                r.macs.map_or_else(String::new, |v| v.to_string()),
                fmt_opt(r.loss),
                fmt_opt(r.accuracy),
                fmt_opt(r.mean_kl_bound),
                r.error
                    .clone()
                    .map_or_else(|| "ok".into(), |e| format!("infeasible: {e}")),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn budget_key(b: &Budget) -> (u8, f64) {
    match *b {
        Budget::RankRatio(z) => (0, z),
        Budget::Params(p) => (1, p as f64),
        Budget::Macs(m) => (2, m as f64),
    }
}

/// Evaluate one assignment per budget. Budgets must share a kind and be
/// sorted ascending; infeasible budgets become marked rows.
pub fn tradeoff_sweep(
    model: &NetworkModel,
    criterion: Criterion,
    budgets: &[Budget],
    data: &Dataset,
    calibration: Option<&Dataset>,
) -> Result<TradeoffReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sorted = budgets.windows(2).all(|w| {
        let (a, b) = (budget_key(&w[0]), budget_key(&w[1]));
        a.0 == b.0 && a.1 <= b.1
    });
    if !sorted {
        return Err(Error::InvalidInput(
            "sweep budgets must be of one kind and sorted ascending".into(),
        ));
    }
    let selector = RankSelector::from_model(model)?;
    let with_bound = prop2_applicable(model).is_ok();
    let rows = budgets
        .par_iter()
        .map(|&budget| {
            let assignment = match selector.select(criterion, budget) {
                Ok(a) => a,
                Err(e) if e.is_usage() => {
                    return Ok(TradeoffRow {
                        budget,
                        criterion,
                        ranks: Vec::new(),
                        params: None,
                        macs: None,
                        loss: None,
                        accuracy: None,
                        mean_kl_bound: None,
                        error: Some(e.to_string()),
                    })
                }
                Err(e) => return Err(e),
            };
            let (params, macs) = selector.cost(&assignment.ranks);
            let eval = evaluate(model, Some(&assignment.ranks), data, calibration)?;
            let mean_kl_bound = if with_bound {
                Some(check_prop2(model, &assignment.ranks, &data.x)?.mean_bound())
            } else {
                None
            };
            Ok(TradeoffRow {
                budget,
                criterion,
                ranks: assignment.ranks,
                params: Some(params),
                macs: Some(macs),
                loss: Some(eval.loss),
                accuracy: Some(eval.accuracy),
                mean_kl_bound,
                error: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TradeoffReport { rows })
}
