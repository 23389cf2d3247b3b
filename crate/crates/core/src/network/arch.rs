//! Declarative architecture description, resolved into [`LayerSpec`]s by
//! propagating shapes from the input.

use super::{Activation, LayerKind, LayerSpec, Pool};
use crate::error::{Error, Result};
use crate::tensor::{ConvKernelShape, Decomposition};
use serde::{Deserialize, Serialize};

/// Per-sample input layout `[height][width][channels]`; vector inputs use
/// `height = width = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn vector(len: usize) -> Self {
        Self {
            height: 1,
            width: 1,
            channels: len,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn yes() -> bool {
    true
}

fn relu() -> Activation {
    Activation::Relu
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerDesc {
    Dense {
        units: usize,
        #[serde(default = "relu")]
        activation: Activation,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default)]
        batchnorm: bool,
    },
    Conv {
        /// `[k_h, k_w]`
        kernel: [usize; 2],
        channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        decomposition: Decomposition,
        #[serde(default)]
        pool: Pool,
        #[serde(default = "relu")]
        activation: Activation,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default)]
        batchnorm: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input: InputShape,
    pub layers: Vec<LayerDesc>,
}

impl ArchSpec {
    /// Plain MLP: `dims[0] → dims[1] → …`, ReLU hidden layers, softmax output.
    pub fn mlp(dims: &[usize], bias: bool) -> Self {
        let n = dims.len() - 1;
        Self {
            input: InputShape::vector(dims[0]),
            layers: dims[1..]
                .iter()
                .enumerate()
                .map(|(i, &units)| LayerDesc::Dense {
                    units,
                    activation: if i + 1 == n {
                        Activation::Softmax
                    } else {
                        Activation::Relu
                    },
                    bias,
                    batchnorm: false,
                })
                .collect(),
        }
    }

    pub fn build(&self) -> Result<Vec<LayerSpec>> {
        let mut shape = self.input;
        if shape.is_empty() {
            return Err(Error::InvalidInput("input shape must be non-empty".into()));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, desc) in self.layers.iter().enumerate() {
            let spec = match *desc {
                LayerDesc::Dense {
                    units,
                    activation,
                    bias,
                    batchnorm,
                } => {
                    let spec = LayerSpec {
                        kind: LayerKind::Dense {
                            in_dim: shape.len(),
                            out_dim: units,
                        },
                        has_bias: bias,
                        has_batchnorm: batchnorm,
                        activation,
                    };
                    shape = InputShape::vector(units);
                    spec
                }
                LayerDesc::Conv {
                    kernel,
                    channels,
                    stride,
                    padding,
                    decomposition,
                    pool,
                    activation,
                    bias,
                    batchnorm,
                } => {
                    let kshape = ConvKernelShape::new(
                        kernel[0],
                        kernel[1],
                        shape.channels,
                        channels,
                        stride,
                    )
                    .map_err(|e| e.in_layer(i))?;
                    let spec = LayerSpec {
                        kind: LayerKind::Conv {
                            kernel: kshape,
                            in_h: shape.height,
                            in_w: shape.width,
                            padding,
                            decomposition,
                            pool,
                        },
                        has_bias: bias,
                        has_batchnorm: batchnorm,
                        activation,
                    };
                    spec.validate().map_err(|e| e.in_layer(i))?;
                    let (h, w) = spec.pooled_hw();
                    shape = InputShape {
                        height: h,
                        width: w,
                        channels,
                    };
                    spec
                }
            };
            out.push(spec);
        }
        super::validate_layers(&out)?;
        Ok(out)
    }
}
