//! Joint full-rank/low-rank training with Nesterov SGD.
//!
//! Randomness comes from ChaCha8 seeded with `TrainConfig::seed`: stream 0
//! shuffles the sample order (one `shuffle` of `0..n` per epoch), stream 1
//! draws the per-step rank ratio. Weight initialization uses stream 2 (see
//! [`NetworkModel::new`]).

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{
    cross_entropy, forward_with, joint_loss_and_grads_with, lowrank_weights_from, recalibrate_bn,
    BnMode, JointOptions, NetworkModel,
};
use crate::rank::{Budget, Criterion, RankSelector};
use crate::svd_grad::ClipConfig;
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const SHUFFLE_STREAM: u64 = 0;
pub const RATIO_STREAM: u64 = 1;

/// Step decay: multiply by `rate` at each milestone, milestones given as
/// fractions of the total epoch count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<f64>,
    pub rate: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            milestones: vec![0.3, 0.6, 0.8],
            rate: 0.2,
        }
    }
}

impl LrSchedule {
    /// Learning rate for a zero-based epoch.
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * epochs as f64).round() as usize)
            .count();
        self.initial * self.rate.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha_l: f64,
    pub alpha_u: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub criterion: Criterion,
    pub seed: u64,
    pub clip_delta: f64,
    pub rebalance: bool,
    /// Rank ratios evaluated on the validation set after every epoch.
    pub probes: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            alpha_l: 0.01,
            alpha_u: 0.25,
            eta: 5e-4,
            batch_size: 128,
            epochs: 200,
            lr: LrSchedule::default(),
            momentum: 0.9,
            criterion: Criterion::Sv,
            seed: 0,
            clip_delta: 0.99f64.sqrt(),
            rebalance: true,
            probes: vec![0.05, 0.1, 0.25, 0.5, 1.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(0.0 < self.alpha_l && self.alpha_l < self.alpha_u && self.alpha_u <= 1.0) {
            return bad(format!(
                "need 0 < alpha_l < alpha_u <= 1, got {} and {}",
                self.alpha_l, self.alpha_u
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be non-negative, got {}", self.eta));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite())
            || self.lr.rate.is_nan()
            || self.lr.rate <= 0.0
        {
            return bad("learning rate and decay rate must be positive".into());
        }
        if self.lr.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr milestones are fractions of the run in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        ClipConfig::new(self.clip_delta)?;
        for &z in &self.probes {
            Budget::RankRatio(z).validate()?;
        }
        Ok(())
    }

    fn joint_options(&self) -> Result<JointOptions> {
        Ok(JointOptions {
            lambda: self.lambda,
            eta: self.eta,
            clip: ClipConfig::new(self.clip_delta)?,
            rebalance: self.rebalance,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub full_loss: f64,
    /// `None` when `λ = 0`.
    pub low_loss: Option<f64>,
    pub z_mean: Option<f64>,
    pub z_min: Option<f64>,
    pub z_max: Option<f64>,
    /// Validation accuracy per probe ratio, in [`TrainLog::probes`] order.
    pub probe_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub probes: Vec<f64>,
    pub rows: Vec<EpochRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl TrainLog {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "epoch",
            "lr",
            "full_loss",
            "low_loss",
            "z_mean",
            "z_min",
            "z_max",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(self.probes.iter().map(|z| format!("acc_z{z}")));
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(e.into());
        out.write_record(self.csv_header()).map_err(io)?;
        for r in &self.rows {
            let mut rec = vec![
                r.epoch.to_string(),
                r.lr.to_string(),
                r.full_loss.to_string(),
                opt(r.low_loss),
                opt(r.z_mean),
                opt(r.z_min),
                opt(r.z_max),
            ];
            rec.extend(r.probe_accuracy.iter().map(f64::to_string));
            out.write_record(rec).map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Loss and top-1 accuracy on a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

const EVAL_CHUNK: usize = 1024;

/// Evaluate at the given ranks (`None` for full rank). Batch-norm statistics
/// are recomputed at those ranks over `calibration` (default: `data`).
pub fn evaluate(
    model: &NetworkModel,
    ranks: Option<&[usize]>,
    data: &Dataset,
    calibration: Option<&Dataset>,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let exec = match ranks {
        Some(r) => {
            let spectra = model.spectra()?;
            lowrank_weights_from(model, &spectra, r)?.exec
        }
        None => model
            .layers()
            .iter()
            .zip(&model.weights)
            .map(|(s, w)| s.to_exec(w))
            .collect::<Result<_>>()?,
    };
    let stats = if model.has_batchnorm() {
        let calib = calibration.unwrap_or(data);
        Some(recalibrate_bn(model, ranks, &calib.x)?)
    } else {
        None
    };
    let mode = stats.as_deref().map_or(BnMode::Batch, BnMode::Running);
    let (mut loss, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let part = data.subset(chunk);
        let trace = forward_with(model, &exec, &part.x, mode)?;
        loss += cross_entropy(&trace.logits, &part.labels)? * chunk.len() as f64;
        correct += count_correct(&trace.logits, &part.labels);
    }
    Ok(EvalResult {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Argmax hits; ties resolve to the lowest class index.
pub fn count_correct(logits: &Matrix, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == y
        })
        .count()
}

/// Ranks for a rank ratio under a criterion, from a fresh decomposition.
pub fn ranks_for_ratio(model: &NetworkModel, criterion: Criterion, z: f64) -> Result<Vec<usize>> {
    Ok(RankSelector::from_model(model)?
        .select(criterion, Budget::RankRatio(z))?
        .ranks)
}

pub fn train(
    model: NetworkModel,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(NetworkModel, TrainLog)> {
    train_with(model, data, validation, config, |_, _, _| Ok(()))
}

/// [`train`] with a callback after every epoch (checkpoints, progress).
pub fn train_with(
    mut model: NetworkModel,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&NetworkModel, &EpochRow, &TrainLog) -> Result<()>,
) -> Result<(NetworkModel, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.x.cols() != model.input_len() {
        return Err(Error::InvalidInput(format!(
            "data has {} features, model expects {}",
            data.x.cols(),
            model.input_len()
        )));
    }
    if data.num_classes > model.num_classes() {
        return Err(Error::InvalidInput(format!(
            "data has {} classes, model outputs {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let opts = config.joint_options()?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut ratio_rng = ChaCha8Rng::seed_from_u64(config.seed);
    ratio_rng.set_stream(RATIO_STREAM);

    let mut velocity: Vec<Vec<f64>> = model
        .block_slices()
        .iter()
        .map(|s| vec![0.0; s.len()])
        .collect();
    let mut log = TrainLog {
        probes: match validation {
            Some(_) => config.probes.clone(),
            None => Vec::new(),
        },
        rows: Vec::with_capacity(config.epochs),
    };
    let n = data.len();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let lr = config.lr.at(epoch, config.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let (mut full_sum, mut low_sum, mut seen) = (0.0, 0.0, 0usize);
        let mut zs = Vec::new();
        for batch_idx in order.chunks(config.batch_size) {
            let batch = data.subset(batch_idx);
            let (loss, grads) = (|| {
                if config.lambda == 0.0 {
                    return joint_loss_and_grads_with(
                        &model,
                        None,
                        &[],
                        &batch.x,
                        &batch.labels,
                        opts,
                    );
                }
                let z = ratio_rng.random_range(config.alpha_l..config.alpha_u);
                zs.push(z);
                let spectra = model.spectra()?;
                let selector = RankSelector::from_spectra(&model, &spectra)?;
                let ranks = selector
                    .select(config.criterion, Budget::RankRatio(z))?
                    .ranks;
                joint_loss_and_grads_with(
                    &model,
                    Some(&spectra),
                    &ranks,
                    &batch.x,
                    &batch.labels,
                    opts,
                )
            })()
            .map_err(|e| e.at_step(step))?;

            let m = batch_idx.len();
            full_sum += loss.full * m as f64;
            low_sum += loss.low.unwrap_or(0.0) * m as f64;
            seen += m;

            let mu = config.momentum;
            for ((w, g), v) in model
                .block_slices_mut()
                .into_iter()
                .zip(grads.block_slices())
                .zip(velocity.iter_mut())
            {
                for ((wk, &gk), vk) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vk = mu * *vk + gk;
                    *wk -= lr * (gk + mu * *vk);
                }
            }
            step += 1;
        }

        let probe_accuracy = match validation {
            Some(val) => probe(&model, data, val, config)?,
            None => Vec::new(),
        };
        let z_stats = (!zs.is_empty()).then(|| {
            let mean = zs.iter().sum::<f64>() / zs.len() as f64;
            let min = zs.iter().copied().fold(f64::INFINITY, f64::min);
            let max = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mean, min, max)
        });
        let row = EpochRow {
            epoch: epoch + 1,
            lr,
            full_loss: full_sum / seen as f64,
            low_loss: (config.lambda > 0.0).then(|| low_sum / seen as f64),
            z_mean: z_stats.map(|s| s.0),
            z_min: z_stats.map(|s| s.1),
            z_max: z_stats.map(|s| s.2),
            probe_accuracy,
        };
        log.rows.push(row);
        on_epoch(&model, log.rows.last().unwrap(), &log)?;
    }
    if model.has_batchnorm() {
        model.bn_stats = Some(recalibrate_bn(&model, None, &data.x)?);
    }
    Ok((model, log))
}

fn probe(
    model: &NetworkModel,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if config.probes.is_empty() {
        return Ok(Vec::new());
    }
    let selector = RankSelector::from_model(model)?;
    config
        .probes
        .iter()
        .map(|&z| {
            let ranks = selector
                .select(config.criterion, Budget::RankRatio(z))?
                .ranks;
            Ok(evaluate(model, Some(&ranks), val, Some(train))?.accuracy)
        })
        .collect()
}
