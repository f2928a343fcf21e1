use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::gate::GateParams;
use crate::{Error, Result, Tensor};

/// Activation shape of one sample: `[channels, height, width]`.
/// Dense layers produce `[n, 1, 1]`.
pub type Shape3 = [usize; 3];

/// Fully connected layer, `y = W·x + b`, with `W: out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Option<Vec<f64>>,
    pub gate: Option<GateParams>,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Option<Vec<f64>>, gate: Option<GateParams>) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Domain(format!("dense weights must be a matrix, got {:?}", weights.shape())));
        }
        let out = weights.shape()[0];
        if let Some(b) = &bias {
            if b.len() != out {
                return Err(Error::Dimension {
                    op: "dense bias",
                    left: weights.shape().to_vec(),
                    right: vec![b.len()],
                });
            }
        }
        if let Some(g) = &gate {
            if g.width() != out {
                return Err(Error::Dimension {
                    op: "dense gate",
                    left: weights.shape().to_vec(),
                    right: vec![g.width()],
                });
            }
        }
        Ok(Self { weights, bias, gate })
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Valid-padding 2-D convolution with kernels `filters × in_channels × kh × kw`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    pub kernels: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub gate: Option<GateParams>,
}

impl Conv2dLayer {
    pub fn new(kernels: Tensor, bias: Vec<f64>, gate: Option<GateParams>) -> Result<Self> {
        if kernels.shape().len() != 4 {
            return Err(Error::Domain(format!("conv kernels must be 4-D, got {:?}", kernels.shape())));
        }
        let filters = kernels.shape()[0];
        if bias.len() != filters {
            return Err(Error::Dimension { op: "conv bias", left: kernels.shape().to_vec(), right: vec![bias.len()] });
        }
        if let Some(g) = &gate {
            if g.width() != filters {
                return Err(Error::Dimension {
                    op: "conv gate",
                    left: kernels.shape().to_vec(),
                    right: vec![g.width()],
                });
            }
        }
        Ok(Self { kernels, bias, stride: 1, gate })
    }

    pub fn filters(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernels.shape()[2], self.kernels.shape()[3])
    }
}

/// Non-overlapping square max pooling (stride equals window).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPoolLayer {
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(Conv2dLayer),
    Pool(MaxPoolLayer),
}

impl Layer {
    pub fn gate(&self) -> Option<&GateParams> {
        match self {
            Layer::Dense(l) => l.gate.as_ref(),
            Layer::Conv(l) => l.gate.as_ref(),
            Layer::Pool(_) => None,
        }
    }

    pub fn gate_mut(&mut self) -> Option<&mut GateParams> {
        match self {
            Layer::Dense(l) => l.gate.as_mut(),
            Layer::Conv(l) => l.gate.as_mut(),
            Layer::Pool(_) => None,
        }
    }

    /// Dense and conv layers carry parameters; pooling does not.
    pub fn is_parametric(&self) -> bool {
        !matches!(self, Layer::Pool(_))
    }

    /// Neurons (dense) or feature maps (conv).
    pub fn width(&self) -> Option<usize> {
        match self {
            Layer::Dense(l) => Some(l.out_features()),
            Layer::Conv(l) => Some(l.filters()),
            Layer::Pool(_) => None,
        }
    }

    /// Weight and bias element count.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(l) => l.weights.len() + l.bias.as_ref().map_or(0, Vec::len),
            Layer::Conv(l) => l.kernels.len() + l.bias.len(),
            Layer::Pool(_) => 0,
        }
    }

    /// Output shape for an input of shape `input`.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        match self {
            Layer::Dense(l) => {
                let n: usize = input.iter().product();
                if n != l.in_features() {
                    return Err(Error::Dimension {
                        op: "dense input",
                        left: input.to_vec(),
                        right: l.weights.shape().to_vec(),
                    });
                }
                Ok([l.out_features(), 1, 1])
            }
            Layer::Conv(l) => {
                let (kh, kw) = l.kernel_size();
                if input[0] != l.in_channels() || input[1] < kh || input[2] < kw || l.stride == 0 {
                    return Err(Error::Dimension {
                        op: "conv input",
                        left: input.to_vec(),
                        right: l.kernels.shape().to_vec(),
                    });
                }
                Ok([l.filters(), (input[1] - kh) / l.stride + 1, (input[2] - kw) / l.stride + 1])
            }
            Layer::Pool(p) => {
                if p.window < 2 || input[1] < p.window || input[2] < p.window {
                    return Err(Error::Dimension { op: "max pool", left: input.to_vec(), right: vec![p.window] });
                }
                Ok([input[0], input[1] / p.window, input[2] / p.window])
            }
        }
    }
}

/// Unfolds one `c×h×w` sample into `(c·kh·kw) × (oh·ow)` columns.
pub(crate) fn im2col(src: &[f64], shape: Shape3, kh: usize, kw: usize, stride: usize, cols: &mut [f64]) {
    let [c, h, w] = shape;
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let pos = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * pos;
                for oy in 0..oh {
                    let src_row = &src[ch * h * w + (oy * stride + ky) * w..];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if stride == 1 {
                        dst.copy_from_slice(&src_row[kx..kx + ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src_row[ox * stride + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add(cols: &[f64], shape: Shape3, kh: usize, kw: usize, stride: usize, dst: &mut [f64]) {
    let [c, h, w] = shape;
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let pos = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * pos;
                for oy in 0..oh {
                    let base = ch * h * w + (oy * stride + ky) * w + kx;
                    for ox in 0..ow {
                        dst[base + ox * stride] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}
