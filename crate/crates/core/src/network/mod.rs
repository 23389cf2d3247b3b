//! Layer graph, parameter store and execution in full-rank and low-rank mode.
//!
//! A [`NetworkModel`] holds one full-rank weight matrix per layer plus the
//! shared parameters Θ (biases, batch-norm scale and shift). Low-rank
//! execution never copies Θ: both modes read the same storage, only the
//! weight matrices are swapped for their truncations.
//!
//! Weights are stored in their decomposition form: `in × out` for dense
//! layers, and the channel- or spatial-wise matricization for convolutions.
//! Execution always uses the channel-wise form (`patches · W`).

mod arch;
mod backward;
mod forward;
mod io;

pub use arch::{ArchSpec, InputShape, LayerDesc};
pub use backward::{
    full_loss_and_grads, joint_loss_and_grads, joint_loss_and_grads_with, Gradients, JointLoss,
    JointOptions, LayerGrads,
};
pub use forward::{
    cross_entropy, forward_full, forward_lowrank, forward_with, lowrank_weights,
    lowrank_weights_from, recalibrate_bn, softmax_rows, BnMode, ForwardTrace, LayerTrace,
    LowRankWeights,
};
pub use io::{load_model, read_model, save_model, write_model, ModelFile, FORMAT_VERSION, MAGIC};

use crate::error::{Error, Result};
use crate::tensor::{
    dematricize, matricize_channel, svd, ConvGeometry, ConvKernel, ConvKernelShape, Decomposition,
    Matrix, SvdFactors,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    /// Final layer only: the layer output is the logit vector and the
    /// softmax is applied by the loss and by [`ForwardTrace::probs`].
    Softmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    #[default]
    None,
    /// 2×2 average pooling, stride 2.
    Avg2,
    /// 2×2 max pooling, stride 2.
    Max2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv {
        kernel: ConvKernelShape,
        in_h: usize,
        in_w: usize,
        padding: usize,
        decomposition: Decomposition,
        pool: Pool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub has_bias: bool,
    pub has_batchnorm: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { in_dim, out_dim },
            has_bias: false,
            has_batchnorm: false,
            activation,
        }
    }

    pub fn with_bias(mut self, on: bool) -> Self {
        self.has_bias = on;
        self
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.has_batchnorm = on;
        self
    }

    pub fn geometry(&self) -> Option<ConvGeometry> {
        match self.kind {
            LayerKind::Conv {
                kernel,
                in_h,
                in_w,
                padding,
                ..
            } => Some(ConvGeometry {
                kernel,
                in_h,
                in_w,
                padding,
            }),
            LayerKind::Dense { .. } => None,
        }
    }

    pub fn pool(&self) -> Pool {
        match self.kind {
            LayerKind::Conv { pool, .. } => pool,
            LayerKind::Dense { .. } => Pool::None,
        }
    }

    /// Decomposition actually applied (always channel-wise for 1×1 kernels).
    pub fn decomposition(&self) -> Option<Decomposition> {
        match self.kind {
            LayerKind::Conv {
                kernel,
                decomposition,
                ..
            } => Some(decomposition.effective(&kernel)),
            LayerKind::Dense { .. } => None,
        }
    }

    /// Shape `(m, n)` of the stored weight matrix.
    pub fn weight_shape(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense { in_dim, out_dim } => (in_dim, out_dim),
            LayerKind::Conv {
                kernel,
                decomposition,
                ..
            } => decomposition.matrix_shape(&kernel),
        }
    }

    /// Shape of the channel-wise execution matrix.
    pub fn exec_shape(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense { in_dim, out_dim } => (in_dim, out_dim),
            LayerKind::Conv { kernel, .. } => (kernel.patch_len(), kernel.c_out),
        }
    }

    pub fn full_rank(&self) -> usize {
        let (m, n) = self.weight_shape();
        m.min(n)
    }

    /// Output channels (features for dense layers).
    pub fn channels(&self) -> usize {
        self.exec_shape().1
    }

    /// Output spatial extent before pooling; `(1, 1)` for dense layers.
    pub fn output_hw(&self) -> (usize, usize) {
        self.geometry().map_or((1, 1), |g| (g.out_h(), g.out_w()))
    }

    /// Spatial extent after pooling.
    pub fn pooled_hw(&self) -> (usize, usize) {
        let (h, w) = self.output_hw();
        match self.pool() {
            Pool::None => (h, w),
            Pool::Avg2 | Pool::Max2 => (h / 2, w / 2),
        }
    }

    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { in_dim, .. } => in_dim,
            LayerKind::Conv { .. } => self.geometry().unwrap().input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        let (h, w) = self.pooled_hw();
        h * w * self.channels()
    }

    /// Convert a stored-layout matrix to the channel-wise execution form.
    pub fn to_exec(&self, stored: &Matrix) -> Result<Matrix> {
        match self.kind {
            LayerKind::Conv {
                kernel,
                decomposition,
                ..
            } if decomposition.effective(&kernel) == Decomposition::Spatial => Ok(
                matricize_channel(&dematricize(kernel, stored, decomposition)?),
            ),
            _ => Ok(stored.clone()),
        }
    }

    /// Inverse of [`LayerSpec::to_exec`]; also maps gradients, since both
    /// layouts are permutations of the same entries.
    pub fn to_stored(&self, exec: &Matrix) -> Result<Matrix> {
        match self.kind {
            LayerKind::Conv {
                kernel,
                decomposition,
                ..
            } if decomposition.effective(&kernel) == Decomposition::Spatial => {
                let k = ConvKernel::new(kernel, exec.data().to_vec())?;
                Ok(crate::tensor::matricize(&k, decomposition))
            }
            _ => Ok(exec.clone()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Dense { in_dim, out_dim } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(Error::InvalidInput(format!(
                        "dense layer dimensions must be positive, got {in_dim}x{out_dim}"
                    )));
                }
            }
            LayerKind::Conv { pool, .. } => {
                let g = self.geometry().unwrap();
                g.validate()?;
                if g.in_h == 0 || g.in_w == 0 {
                    return Err(Error::InvalidInput("conv input must be non-empty".into()));
                }
                if pool != Pool::None && (g.out_h() < 2 || g.out_w() < 2) {
                    return Err(Error::InvalidInput(format!(
                        "2x2 pooling needs an output of at least 2x2, got {}x{}",
                        g.out_h(),
                        g.out_w()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Shared per-layer parameters Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTheta {
    pub bias: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Inference-time batch-norm statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    BnMean,
    BnVar,
}

/// One contiguous parameter block, in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub layer: usize,
    pub kind: BlockKind,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    layers: Vec<LayerSpec>,
    pub weights: Vec<Matrix>,
    pub theta: Vec<LayerTheta>,
    /// Full-rank inference statistics, filled in after training.
    pub bn_stats: Option<Vec<Option<BnStats>>>,
}

impl NetworkModel {
    /// He-normal weights, zero biases, `γ = 1`, `β = 0`.
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Self::init_with(layers, &mut rng)
    }

    pub fn init_with(layers: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Result<Self> {
        validate_layers(&layers)?;
        let mut weights = Vec::with_capacity(layers.len());
        for spec in &layers {
            let (fan_in, _) = spec.exec_shape();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            let (m, n) = spec.weight_shape();
            weights.push(Matrix::from_fn(m, n, |_, _| normal.sample(rng)));
        }
        let theta = layers.iter().map(default_theta).collect();
        Ok(Self {
            layers,
            weights,
            theta,
            bn_stats: None,
        })
    }

    /// Build a model from explicit weights; Θ takes its default values.
    pub fn from_weights(layers: Vec<LayerSpec>, weights: Vec<Matrix>) -> Result<Self> {
        validate_layers(&layers)?;
        if weights.len() != layers.len() {
            return Err(Error::InvalidInput(format!(
                "{} weight matrices for {} layers",
                weights.len(),
                layers.len()
            )));
        }
        for (i, (spec, w)) in layers.iter().zip(&weights).enumerate() {
            if w.shape() != spec.weight_shape() {
                return Err(Error::InvalidInput(format!(
                    "layer {i}: weight shape {:?}, expected {:?}",
                    w.shape(),
                    spec.weight_shape()
                )));
            }
            if !w.is_finite() {
                return Err(Error::InvalidInput(format!("layer {i}: non-finite weight")));
            }
        }
        let theta = layers.iter().map(default_theta).collect();
        Ok(Self {
            layers,
            weights,
            theta,
            bn_stats: None,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input_len()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().output_len()
    }

    pub fn full_ranks(&self) -> Vec<usize> {
        self.layers.iter().map(LayerSpec::full_rank).collect()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.has_batchnorm)
    }

    /// Per-layer SVD of the stored weight in tall orientation (`W` if
    /// `m >= n`, else `Wᵀ`). Singular values are orientation independent.
    pub fn spectra(&self) -> Result<Vec<SvdFactors>> {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let tall = if w.rows() >= w.cols() {
                    svd(w)
                } else {
                    svd(&w.transpose())
                };
                tall.map_err(|e| e.in_layer(i))
            })
            .collect()
    }

    /// Check a rank vector against this model.
    pub fn check_ranks(&self, ranks: &[usize]) -> Result<()> {
        if ranks.len() != self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "{} ranks for {} layers",
                ranks.len(),
                self.layers.len()
            )));
        }
        for (i, (&r, spec)) in ranks.iter().zip(&self.layers).enumerate() {
            let max = spec.full_rank();
            if r == 0 || r > max {
                return Err(Error::InvalidRank { rank: r, max }.in_layer(i));
            }
        }
        Ok(())
    }

    /// Trainable blocks in declaration order: per layer weight, bias, γ, β.
    pub fn blocks(&self) -> Vec<BlockInfo> {
        let mut out = Vec::new();
        for (layer, (w, t)) in self.weights.iter().zip(&self.theta).enumerate() {
            out.push(BlockInfo {
                layer,
                kind: BlockKind::Weight,
                len: w.data().len(),
            });
            for (kind, v) in [
                (BlockKind::Bias, &t.bias),
                (BlockKind::Gamma, &t.gamma),
                (BlockKind::Beta, &t.beta),
            ] {
                if let Some(v) = v {
                    out.push(BlockInfo {
                        layer,
                        kind,
                        len: v.len(),
                    });
                }
            }
        }
        out
    }

    pub fn block_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, t) in self.weights.iter().zip(&self.theta) {
            out.push(w.data());
            for v in [&t.bias, &t.gamma, &t.beta].into_iter().flatten() {
                out.push(v);
            }
        }
        out
    }

    pub fn block_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, t) in self.weights.iter_mut().zip(self.theta.iter_mut()) {
            out.push(w.data_mut());
            for v in [&mut t.bias, &mut t.gamma, &mut t.beta]
                .into_iter()
                .flatten()
            {
                out.push(v);
            }
        }
        out
    }

    /// `½ Σ ‖W_ℓ‖_F²`
    pub fn weight_penalty(&self) -> f64 {
        0.5 * self
            .weights
            .iter()
            .map(|w| w.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
    }
}

fn default_theta(spec: &LayerSpec) -> LayerTheta {
    let c = spec.channels();
    LayerTheta {
        bias: spec.has_bias.then(|| vec![0.0; c]),
        gamma: spec.has_batchnorm.then(|| vec![1.0; c]),
        beta: spec.has_batchnorm.then(|| vec![0.0; c]),
    }
}

pub(crate) fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidInput("model needs at least one layer".into()));
    }
    for (i, spec) in layers.iter().enumerate() {
        spec.validate().map_err(|e| e.in_layer(i))?;
        if spec.activation == Activation::Softmax && i + 1 != layers.len() {
            return Err(Error::InvalidInput(format!(
                "layer {i}: softmax is only allowed on the final layer"
            )));
        }
    }
    for (i, pair) in layers.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if a.output_len() != b.input_len() {
            return Err(Error::InvalidInput(format!(
                "layer {i} produces {} values but layer {} expects {}",
                a.output_len(),
                i + 1,
                b.input_len()
            )));
        }
        if let (Some(_), Some(g)) = (a.geometry(), b.geometry()) {
            let (h, w) = a.pooled_hw();
            if (h, w, a.channels()) != (g.in_h, g.in_w, g.kernel.c_in) {
                return Err(Error::InvalidInput(format!(
                    "layer {i} output {h}x{w}x{} does not match layer {} input {}x{}x{}",
                    a.channels(),
                    i + 1,
                    g.in_h,
                    g.in_w,
                    g.kernel.c_in
                )));
            }
        }
    }
    Ok(())
}
