//! Convolution kernels, their matrix forms, and im2col.
//!
//! A [`ConvKernel`] stores its weights in `[k_h][k_w][c_in][c_out]` order.
//! Two matricizations are supported:
//!
//! - channel-wise: row `(h·k_w + w)·c_in + ci`, column `co`, giving a
//!   `(k_h·k_w·c_in) × c_out` matrix. This is the raw buffer reinterpreted, and
//!   it is also the layout [`im2col`] produces patches in, so `patches · W`
//!   computes the convolution.
//! - spatial-wise: row `h·c_in + ci`, column `w·c_out + co`, giving a
//!   `(k_h·c_in) × (k_w·c_out)` matrix. A rank-`r` factor pair of this matrix
//!   is a `k_h × 1` convolution into `r` channels followed by a `1 × k_w` one.
//!
//! Kernels with `k_h = k_w = 1` have no spatial structure; [`matricize`]
//! always uses the channel form for them.
//!
//! Feature maps are stored per sample as `[h][w][c]`.

use super::Matrix;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvKernelShape {
    pub k_h: usize,
    pub k_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ConvKernelShape {
    pub fn new(k_h: usize, k_w: usize, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let s = Self {
            k_h,
            k_w,
            c_in,
            c_out,
            stride,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_h == 0 || self.k_w == 0 || self.c_in == 0 || self.c_out == 0 || self.stride == 0 {
            return Err(Error::InvalidInput(format!(
                "kernel shape fields must all be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.k_h * self.k_w * self.c_in * self.c_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1
    }

    /// Patch length, i.e. the row count of the channel-wise matrix.
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.c_in
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decomposition {
    #[default]
    Channel,
    Spatial,
}

impl Decomposition {
    /// The form actually used for a kernel of this shape.
    pub fn effective(self, shape: &ConvKernelShape) -> Decomposition {
        if shape.is_pointwise() {
            Decomposition::Channel
        } else {
            self
        }
    }

    pub fn matrix_shape(self, shape: &ConvKernelShape) -> (usize, usize) {
        match self.effective(shape) {
            Decomposition::Channel => (shape.patch_len(), shape.c_out),
            Decomposition::Spatial => (shape.k_h * shape.c_in, shape.k_w * shape.c_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    shape: ConvKernelShape,
    data: Vec<f64>,
}

impl ConvKernel {
    pub fn new(shape: ConvKernelShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::InvalidInput(format!(
                "kernel {shape:?} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &ConvKernelShape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, ci: usize, co: usize) -> usize {
        let s = &self.shape;
        ((h * s.k_w + w) * s.c_in + ci) * s.c_out + co
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, ci: usize, co: usize) -> f64 {
        self.data[self.index(h, w, ci, co)]
    }
}

pub fn matricize_channel(kernel: &ConvKernel) -> Matrix {
    let s = kernel.shape;
    Matrix::from_vec(s.patch_len(), s.c_out, kernel.data.clone())
        .expect("kernel length matches its shape")
}

pub fn matricize_spatial(kernel: &ConvKernel) -> Matrix {
    let s = kernel.shape;
    if s.is_pointwise() {
        return matricize_channel(kernel);
    }
    let mut m = Matrix::zeros(s.k_h * s.c_in, s.k_w * s.c_out);
    for h in 0..s.k_h {
        for w in 0..s.k_w {
            for ci in 0..s.c_in {
                for co in 0..s.c_out {
                    m.set(h * s.c_in + ci, w * s.c_out + co, kernel.get(h, w, ci, co));
                }
            }
        }
    }
    m
}

pub fn matricize(kernel: &ConvKernel, decomposition: Decomposition) -> Matrix {
    match decomposition.effective(&kernel.shape) {
        Decomposition::Channel => matricize_channel(kernel),
        Decomposition::Spatial => matricize_spatial(kernel),
    }
}

fn check_matrix(shape: &ConvKernelShape, m: &Matrix, expect: (usize, usize)) -> Result<()> {
    shape.validate()?;
    if m.shape() != expect {
        return Err(Error::InvalidInput(format!(
            "matrix {:?} does not match kernel {shape:?} (expected {expect:?})",
            m.shape()
        )));
    }
    Ok(())
}

pub fn dematricize_channel(shape: ConvKernelShape, m: &Matrix) -> Result<ConvKernel> {
    check_matrix(&shape, m, (shape.patch_len(), shape.c_out))?;
    ConvKernel::new(shape, m.data().to_vec())
}

pub fn dematricize_spatial(shape: ConvKernelShape, m: &Matrix) -> Result<ConvKernel> {
    if shape.is_pointwise() {
        return dematricize_channel(shape, m);
    }
    check_matrix(&shape, m, (shape.k_h * shape.c_in, shape.k_w * shape.c_out))?;
    let mut data = vec![0.0; shape.len()];
    for h in 0..shape.k_h {
        for w in 0..shape.k_w {
            for ci in 0..shape.c_in {
                for co in 0..shape.c_out {
                    data[((h * shape.k_w + w) * shape.c_in + ci) * shape.c_out + co] =
                        m.get(h * shape.c_in + ci, w * shape.c_out + co);
                }
            }
        }
    }
    ConvKernel::new(shape, data)
}

pub fn dematricize(
    shape: ConvKernelShape,
    m: &Matrix,
    decomposition: Decomposition,
) -> Result<ConvKernel> {
    match decomposition.effective(&shape) {
        Decomposition::Channel => dematricize_channel(shape, m),
        Decomposition::Spatial => dematricize_spatial(shape, m),
    }
}

/// Spatial layout of one convolution application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: ConvKernelShape,
    pub in_h: usize,
    pub in_w: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel.k_h) / self.kernel.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel.k_w) / self.kernel.stride + 1
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.kernel.c_in
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.in_h + 2 * self.padding < self.kernel.k_h
            || self.in_w + 2 * self.padding < self.kernel.k_w
        {
            return Err(Error::InvalidInput(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel.k_h,
                self.kernel.k_w,
                self.in_h + 2 * self.padding,
                self.in_w + 2 * self.padding
            )));
        }
        Ok(())
    }

    /// Input offset feeding patch entry `(h, w, ci)` at output `(oy, ox)`, if
    /// it falls inside the unpadded input.
    #[inline]
    fn source(&self, oy: usize, ox: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let y = (oy * self.kernel.stride + h).checked_sub(self.padding)?;
        let x = (ox * self.kernel.stride + w).checked_sub(self.padding)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

/// Patches of one sample: `positions × patch_len`, with columns ordered like
/// the rows of the channel-wise kernel matrix.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Matrix {
    assert_eq!(input.len(), g.input_len(), "im2col input length");
    let k = g.kernel;
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = Matrix::zeros(oh * ow, k.patch_len());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row_mut(oy * ow + ox);
            for h in 0..k.k_h {
                for w in 0..k.k_w {
                    if let Some((y, x)) = g.source(oy, ox, h, w) {
                        let src = (y * g.in_w + x) * k.c_in;
                        let dst = (h * k.k_w + w) * k.c_in;
                        row[dst..dst + k.c_in].copy_from_slice(&input[src..src + k.c_in]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub fn col2im(cols: &Matrix, g: &ConvGeometry) -> Vec<f64> {
    let k = g.kernel;
    let (oh, ow) = (g.out_h(), g.out_w());
    assert_eq!(cols.shape(), (oh * ow, k.patch_len()), "col2im shape");
    let mut out = vec![0.0; g.input_len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row(oy * ow + ox);
            for h in 0..k.k_h {
                for w in 0..k.k_w {
                    if let Some((y, x)) = g.source(oy, ox, h, w) {
                        let dst = (y * g.in_w + x) * k.c_in;
                        let src = (h * k.k_w + w) * k.c_in;
                        for c in 0..k.c_in {
                            out[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}
