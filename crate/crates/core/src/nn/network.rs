use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::gate::{BinaryGates, GateParams};
use super::layer::{col2im_add, im2col, Layer, Shape3};
use super::loss::softmax_xent;
use crate::tensor::{gemm_acc, transpose_into};
use crate::{Error, Result, Tensor};

/// Which value of the *other* gate enters the straight-through gate gradients.
///
/// With `Binarized`, `∂L/∂w` uses `d'` and `∂L/∂d` uses `w'`; with `Real` the
/// raw clipped values `d` and `w` are used instead. The input gradient always
/// uses the binarized gates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteCounterpart {
    #[default]
    Binarized,
    Real,
}

/// An ordered stack of layers ending in an ungated dense classifier.
#[derive(Debug, Clone)]
pub struct Network {
    input: Shape3,
    layers: Vec<Layer>,
    generation: u64,
}

// The mutation counter only guards forward caches; equal parameters mean
// equal networks.
impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input && self.layers == other.layers
    }
}

/// Intermediates of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    batch: usize,
    layers: Vec<LayerCache>,
    logits: Tensor,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense { input: Vec<f64>, pre: Vec<f64>, gates: Option<BinaryGates> },
    Conv { input_shape: Shape3, cols: Vec<f64>, pre: Vec<f64>, gates: Option<BinaryGates> },
    Pool { input_len: usize, argmax: Vec<u32> },
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Binarized gates used at layer `index` (None for ungated layers).
    pub fn gates(&self, index: usize) -> Option<&BinaryGates> {
        match self.layers.get(index)? {
            LayerCache::Dense { gates, .. } | LayerCache::Conv { gates, .. } => gates.as_ref(),
            LayerCache::Pool { .. } => None,
        }
    }

    /// Pre-activations of layer `index`, `B × width` (dense) or `B × F × positions` (conv).
    pub fn pre_activation(&self, index: usize) -> Option<&[f64]> {
        match self.layers.get(index)? {
            LayerCache::Dense { pre, .. } | LayerCache::Conv { pre, .. } => Some(pre),
            LayerCache::Pool { .. } => None,
        }
    }
}

/// Gradients of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    /// Same layout as the weight/kernel tensor.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    /// Empty for ungated layers.
    pub gate_w: Vec<f64>,
    pub gate_d: f64,
}

/// Loss-term gradients for every layer (None for pooling layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub layers: Vec<Option<ParamGrads>>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.layers.iter().flatten().all(|g| {
                g.weights.iter().all(|v| v.is_finite())
                    && g.bias.iter().flatten().all(|v| v.is_finite())
                    && g.gate_w.iter().all(|v| v.is_finite())
                    && g.gate_d.is_finite()
            })
    }
}

impl Network {
    /// Validates shapes layer by layer. The last layer must be an ungated
    /// dense classifier.
    pub fn new(input: Shape3, layers: Vec<Layer>) -> Result<Self> {
        if input.contains(&0) {
            return Err(Error::Domain(format!("input shape {input:?} has a zero dimension")));
        }
        match layers.last() {
            Some(Layer::Dense(l)) if l.gate.is_none() => {}
            Some(Layer::Dense(_)) => return Err(Error::Domain("output layer must not be gated".into())),
            _ => return Err(Error::Domain("network must end with a dense output layer".into())),
        }
        let mut shape = input;
        for layer in &layers {
            shape = layer.output_shape(shape)?;
        }
        Ok(Self { input, layers, generation: 0 })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding forward caches.
    /// Callers must keep layer shapes consistent.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    /// Counter bumped by every mutable access; stamps forward caches.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn classes(&self) -> usize {
        self.layers.last().and_then(Layer::width).expect("validated network")
    }

    /// Per-sample activation shape after each layer.
    pub fn output_shapes(&self) -> Vec<Shape3> {
        let mut shape = self.input;
        self.layers
            .iter()
            .map(|l| {
                shape = l.output_shape(shape).expect("validated network");
                shape
            })
            .collect()
    }

    /// Indices (into [`Network::layers`]) of dense and conv layers, in order.
    pub fn parametric_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_parametric()).collect()
    }

    /// A layer may become linear and be merged into its successor only if it
    /// is a gated dense layer immediately followed by another dense layer.
    pub fn is_collapsible(&self, index: usize) -> bool {
        matches!(self.layers.get(index), Some(Layer::Dense(l)) if l.gate.is_some())
            && matches!(self.layers.get(index + 1), Some(Layer::Dense(_)))
    }

    pub fn gates(&self) -> impl Iterator<Item = (usize, &GateParams)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| l.gate().map(|g| (i, g)))
    }

    /// Rounds every weight and bias to the nearest `f32`. Checkpoints store
    /// parameters as 32-bit floats; keeping them representable makes saving
    /// and loading lossless.
    pub fn round_to_storage(&mut self) {
        for layer in self.layers_mut() {
            match layer {
                Layer::Dense(l) => {
                    round_f32(l.weights.data_mut());
                    if let Some(b) = &mut l.bias {
                        round_f32(b);
                    }
                }
                Layer::Conv(l) => {
                    round_f32(l.kernels.data_mut());
                    round_f32(&mut l.bias);
                }
                Layer::Pool(_) => {}
            }
        }
    }

    /// Logits and the cache needed by [`Network::backward`].
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (logits, layers) = self.run(batch, true)?;
        let cache = ForwardCache { generation: self.generation, batch: batch.rows(), layers, logits: logits.clone() };
        Ok((logits, cache))
    }

    /// Logits only; nothing is retained.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.run(batch, false)?.0)
    }

    /// Arg-max class per sample.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                // first index of the maximum
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    fn run(&self, batch: &Tensor, keep: bool) -> Result<(Tensor, Vec<LayerCache>)> {
        let input_len = self.input_len();
        if batch.shape().len() < 2 || batch.cols() != input_len {
            return Err(Error::Dimension { op: "forward", left: batch.shape().to_vec(), right: self.input.to_vec() });
        }
        let b = batch.rows();
        let mut act = batch.data().to_vec();
        let mut shape = self.input;
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });

        for layer in &self.layers {
            let out_shape = layer.output_shape(shape)?;
            match layer {
                Layer::Dense(l) => {
                    let (out, inp) = (l.out_features(), l.in_features());
                    let mut wt = vec![0.0; inp * out];
                    transpose_into(l.weights.data(), out, inp, &mut wt);
                    let mut pre = vec![0.0; b * out];
                    gemm_acc(b, inp, out, &act, &wt, &mut pre);
                    if let Some(bias) = &l.bias {
                        for row in pre.chunks_exact_mut(out) {
                            for (p, bv) in row.iter_mut().zip(bias) {
                                *p += bv;
                            }
                        }
                    }
                    let gates = l.gate.as_ref().map(GateParams::binarized).transpose()?;
                    let y = match &gates {
                        Some(g) => {
                            let mut y = pre.clone();
                            for row in y.chunks_exact_mut(out) {
                                for (v, &w) in row.iter_mut().zip(&g.w) {
                                    *v = super::gate::tsrelu_apply(*v, w, g.d);
                                }
                            }
                            y
                        }
                        None => pre.clone(),
                    };
                    if keep {
                        caches.push(LayerCache::Dense { input: core::mem::take(&mut act), pre, gates });
                    }
                    act = y;
                }
                Layer::Conv(l) => {
                    let (kh, kw) = l.kernel_size();
                    let f = l.filters();
                    let q = l.in_channels() * kh * kw;
                    let pos = out_shape[1] * out_shape[2];
                    let in_len: usize = shape.iter().product();
                    let mut pre = vec![0.0; b * f * pos];
                    let mut cols_all = if keep { vec![0.0; b * q * pos] } else { Vec::new() };
                    let mut cols = vec![0.0; q * pos];
                    for s in 0..b {
                        im2col(&act[s * in_len..(s + 1) * in_len], shape, kh, kw, l.stride, &mut cols);
                        let out = &mut pre[s * f * pos..(s + 1) * f * pos];
                        gemm_acc(f, q, pos, l.kernels.data(), &cols, out);
                        for (map, bv) in out.chunks_exact_mut(pos).zip(&l.bias) {
                            map.iter_mut().for_each(|v| *v += bv);
                        }
                        if keep {
                            cols_all[s * q * pos..(s + 1) * q * pos].copy_from_slice(&cols);
                        }
                    }
                    let gates = l.gate.as_ref().map(GateParams::binarized).transpose()?;
                    let y = match &gates {
                        Some(g) => {
                            let mut y = pre.clone();
                            for sample in y.chunks_exact_mut(f * pos) {
                                for (map, &w) in sample.chunks_exact_mut(pos).zip(&g.w) {
                                    map.iter_mut().for_each(|v| *v = super::gate::tsrelu_apply(*v, w, g.d));
                                }
                            }
                            y
                        }
                        None => pre.clone(),
                    };
                    if keep {
                        caches.push(LayerCache::Conv { input_shape: shape, cols: cols_all, pre, gates });
                    }
                    act = y;
                }
                Layer::Pool(p) => {
                    let [c, h, w] = shape;
                    let [_, oh, ow] = out_shape;
                    let k = p.window;
                    let in_len = c * h * w;
                    let out_len = c * oh * ow;
                    let mut y = vec![0.0; b * out_len];
                    let mut argmax = if keep { vec![0u32; b * out_len] } else { Vec::new() };
                    for s in 0..b {
                        for ch in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = s * in_len + ch * h * w + oy * k * w + ox * k;
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let idx = s * in_len + ch * h * w + (oy * k + ky) * w + ox * k + kx;
                                            // strict comparison keeps the first maximum in scan order
                                            if act[idx] > act[best] {
                                                best = idx;
                                            }
                                        }
                                    }
                                    let o = s * out_len + (ch * oh + oy) * ow + ox;
                                    y[o] = act[best];
                                    if keep {
                                        argmax[o] = (best - s * in_len) as u32;
                                    }
                                }
                            }
                        }
                    }
                    if keep {
                        caches.push(LayerCache::Pool { input_len: in_len, argmax });
                    }
                    act = y;
                }
            }
            shape = out_shape;
        }
        let classes = shape[0];
        Ok((Tensor::new(vec![b, classes], act)?, caches))
    }

    /// Gradients of the mean cross-entropy loss with the default estimator.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        self.backward_with(cache, labels, SteCounterpart::Binarized)
    }

    /// Backpropagation with the straight-through estimator through gate
    /// binarization:
    ///
    /// - input: `∂y/∂x = w'·(1 if x ≥ 0 else d')`
    /// - width gate: `∂L/∂w_j = Σ (x if x ≥ 0 else d̃·x)·∂L/∂y`
    /// - depth gate: `∂L/∂d = Σ_j Σ_{x<0} w̃_j·x·∂L/∂y`
    ///
    /// where `d̃, w̃` are the counterparts selected by `ste`. Conv gate sums run
    /// over the whole feature map.
    pub fn backward_with(&self, cache: &ForwardCache, labels: &[usize], ste: SteCounterpart) -> Result<Gradients> {
        if cache.generation != self.generation || cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache { cache: cache.generation, network: self.generation });
        }
        if labels.len() != cache.batch {
            return Err(Error::Dimension { op: "backward labels", left: vec![cache.batch], right: vec![labels.len()] });
        }
        let b = cache.batch;
        let (loss, dlogits) = softmax_xent(&cache.logits, labels)?;
        let mut delta = dlogits.into_data();
        let mut grads: Vec<Option<ParamGrads>> = vec![None; self.layers.len()];

        for idx in (0..self.layers.len()).rev() {
            let need_input_grad = idx > 0;
            match (&self.layers[idx], &cache.layers[idx]) {
                (Layer::Dense(l), LayerCache::Dense { input, pre, gates }) => {
                    let (out, inp) = (l.out_features(), l.in_features());
                    let (gate_w, gate_d) = match (gates, &l.gate) {
                        (Some(g), Some(raw)) => gate_backward(&mut delta, pre, g, raw, ste, b, out, 1),
                        _ => (Vec::new(), 0.0),
                    };
                    let mut dt = vec![0.0; out * b];
                    transpose_into(&delta, b, out, &mut dt);
                    let mut dw = vec![0.0; out * inp];
                    gemm_acc(out, b, inp, &dt, input, &mut dw);
                    let bias = l.bias.as_ref().map(|_| dt.chunks_exact(b).map(|r| r.iter().sum()).collect());
                    let next = if need_input_grad {
                        let mut dx = vec![0.0; b * inp];
                        gemm_acc(b, out, inp, &delta, l.weights.data(), &mut dx);
                        dx
                    } else {
                        Vec::new()
                    };
                    grads[idx] = Some(ParamGrads { weights: dw, bias, gate_w, gate_d });
                    delta = next;
                }
                (Layer::Conv(l), LayerCache::Conv { input_shape, cols, pre, gates }) => {
                    let (kh, kw) = l.kernel_size();
                    let f = l.filters();
                    let q = l.in_channels() * kh * kw;
                    let out_shape = self.layers[idx].output_shape(*input_shape)?;
                    let pos = out_shape[1] * out_shape[2];
                    let in_len: usize = input_shape.iter().product();
                    let (gate_w, gate_d) = match (gates, &l.gate) {
                        (Some(g), Some(raw)) => gate_backward(&mut delta, pre, g, raw, ste, b, f, pos),
                        _ => (Vec::new(), 0.0),
                    };
                    let mut dw = vec![0.0; f * q];
                    let mut db = vec![0.0; f];
                    let mut cols_t = vec![0.0; pos * q];
                    let mut kt = Vec::new();
                    let mut dcols = Vec::new();
                    let mut dx = Vec::new();
                    if need_input_grad {
                        kt = vec![0.0; q * f];
                        transpose_into(l.kernels.data(), f, q, &mut kt);
                        dcols = vec![0.0; q * pos];
                        dx = vec![0.0; b * in_len];
                    }
                    for s in 0..b {
                        let ds = &delta[s * f * pos..(s + 1) * f * pos];
                        transpose_into(&cols[s * q * pos..(s + 1) * q * pos], q, pos, &mut cols_t);
                        gemm_acc(f, pos, q, ds, &cols_t, &mut dw);
                        for (acc, map) in db.iter_mut().zip(ds.chunks_exact(pos)) {
                            *acc += map.iter().sum::<f64>();
                        }
                        if need_input_grad {
                            dcols.iter_mut().for_each(|v| *v = 0.0);
                            gemm_acc(q, f, pos, &kt, ds, &mut dcols);
                            col2im_add(&dcols, *input_shape, kh, kw, l.stride, &mut dx[s * in_len..(s + 1) * in_len]);
                        }
                    }
                    grads[idx] = Some(ParamGrads { weights: dw, bias: Some(db), gate_w, gate_d });
                    delta = dx;
                }
                (Layer::Pool(_), LayerCache::Pool { input_len, argmax }) => {
                    if need_input_grad {
                        let out_len = argmax.len() / b;
                        let mut dx = vec![0.0; b * input_len];
                        for s in 0..b {
                            for o in 0..out_len {
                                dx[s * input_len + argmax[s * out_len + o] as usize] += delta[s * out_len + o];
                            }
                        }
                        delta = dx;
                    }
                }
                _ => return Err(Error::StaleCache { cache: cache.generation, network: self.generation }),
            }
        }
        Ok(Gradients { loss, layers: grads })
    }
}

/// Applies the gate Jacobian to `delta` in place and returns the gate gradients.
/// `delta` and `pre` are laid out `B × units × positions`.
#[allow(clippy::too_many_arguments)]
fn gate_backward(
    delta: &mut [f64],
    pre: &[f64],
    bin: &BinaryGates,
    raw: &GateParams,
    ste: SteCounterpart,
    batch: usize,
    units: usize,
    positions: usize,
) -> (Vec<f64>, f64) {
    let d_bin = if bin.d { 1.0 } else { 0.0 };
    let d_other = match ste {
        SteCounterpart::Binarized => d_bin,
        SteCounterpart::Real => raw.d,
    };
    let mut gw = vec![0.0; units];
    let mut gd = 0.0;
    for s in 0..batch {
        for j in 0..units {
            let w_bin = if bin.w[j] { 1.0 } else { 0.0 };
            let w_other = match ste {
                SteCounterpart::Binarized => w_bin,
                SteCounterpart::Real => raw.w[j],
            };
            let off = (s * units + j) * positions;
            let mut acc_w = 0.0;
            let mut acc_d = 0.0;
            for p in off..off + positions {
                let (x, g) = (pre[p], delta[p]);
                if x >= 0.0 {
                    acc_w += x * g;
                    delta[p] = w_bin * g;
                } else {
                    acc_w += d_other * x * g;
                    acc_d += x * g;
                    delta[p] = w_bin * d_bin * g;
                }
            }
            gw[j] += acc_w;
            gd += w_other * acc_d;
        }
    }
    (gw, gd)
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}
