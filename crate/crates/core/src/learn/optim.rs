//! Momentum SGD for weights, plain clipped SGD for gates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::regularizer::{clip_gates, GateGrad, RegConfig};
use crate::nn::{Gradients, Layer, Network};
use crate::{Error, Result};

/// Velocity of one parametric layer, laid out like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVelocity {
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Momentum buffers for every layer (None for pooling layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub layers: Vec<Option<LayerVelocity>>,
}

impl Momentum {
    pub fn zeros(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Some(LayerVelocity {
                    weights: vec![0.0; d.weights.len()],
                    bias: d.bias.as_ref().map(|b| vec![0.0; b.len()]),
                }),
                Layer::Conv(c) => {
                    Some(LayerVelocity { weights: vec![0.0; c.kernels.len()], bias: Some(vec![0.0; c.bias.len()]) })
                }
                Layer::Pool(_) => None,
            })
            .collect();
        Self { layers }
    }

    /// True when the buffers line up with `net`'s parameter shapes.
    pub fn matches(&self, net: &Network) -> bool {
        let fresh = Self::zeros(net);
        self.layers.len() == fresh.layers.len()
            && self.layers.iter().zip(&fresh.layers).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => {
                    a.weights.len() == b.weights.len() && a.bias.as_ref().map(Vec::len) == b.bias.as_ref().map(Vec::len)
                }
                (None, None) => true,
                _ => false,
            })
    }
}

/// Step sizes of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    /// Weight and bias learning rate.
    pub lr: f64,
    pub momentum: f64,
    /// Gate learning rate.
    pub gate_lr: f64,
}

/// One update: weights and biases first (momentum SGD), then every width
/// gate, then every depth gate. Gate steps follow the sum of the loss and
/// regularizer gradients, are bounded by `reg.step_clip` and clipped to
/// `[0, 1]`; frozen gates are left untouched. Weights, biases and
/// velocities are rounded to `f32` after the update.
///
/// Nothing is modified when any gradient or updated value is non-finite;
/// a [`Error::Diverged`] is returned instead.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    reg_grads: &[GateGrad],
    steps: StepSizes,
    reg: &RegConfig,
    state: &mut Momentum,
    iteration: u64,
) -> Result<()> {
    let diverged = |what: &str| Error::Diverged { iteration, what: what.into() };
    if !grads.is_finite() {
        return Err(diverged("loss gradient"));
    }
    if reg_grads.iter().any(|g| !g.d.is_finite() || g.w.iter().any(|v| !v.is_finite())) {
        return Err(diverged("regularizer gradient"));
    }
    if grads.layers.len() != net.layers().len() || !state.matches(net) {
        return Err(Error::Domain(format!(
            "gradient/optimizer state for {} layers, network has {}",
            grads.layers.len(),
            net.layers().len()
        )));
    }
    let gated = net.gates().count();
    if reg_grads.len() != gated {
        return Err(Error::Domain(format!("{} regularizer gradients for {gated} gated layers", reg_grads.len())));
    }

    // Velocities are computed first so that a non-finite result leaves both
    // the network and the optimizer state untouched.
    let mut next = state.clone();
    for ((layer, g), v) in net.layers().iter().zip(&grads.layers).zip(&mut next.layers) {
        let (Some(g), Some(v)) = (g, v) else { continue };
        let (w, b): (&[f64], Option<&[f64]>) = match layer {
            Layer::Dense(d) => (d.weights.data(), d.bias.as_deref()),
            Layer::Conv(c) => (c.kernels.data(), Some(&c.bias)),
            Layer::Pool(_) => continue,
        };
        if g.weights.len() != w.len() {
            return Err(Error::Dimension { op: "sgd weights", left: vec![w.len()], right: vec![g.weights.len()] });
        }
        update_velocity(&mut v.weights, &g.weights, w, steps).ok_or_else(|| diverged("weights"))?;
        if let (Some(vb), Some(gb), Some(b)) = (&mut v.bias, &g.bias, b) {
            update_velocity(vb, gb, b, steps).ok_or_else(|| diverged("biases"))?;
        }
    }
    *state = next;

    let layers = net.layers_mut();
    for (layer, v) in layers.iter_mut().zip(&state.layers) {
        let Some(v) = v else { continue };
        match layer {
            Layer::Dense(d) => {
                apply(d.weights.data_mut(), &v.weights);
                if let (Some(b), Some(vb)) = (&mut d.bias, &v.bias) {
                    apply(b, vb);
                }
            }
            Layer::Conv(c) => {
                apply(c.kernels.data_mut(), &v.weights);
                if let Some(vb) = &v.bias {
                    apply(&mut c.bias, vb);
                }
            }
            Layer::Pool(_) => {}
        }
    }

    let gate_step = |g: f64| (-steps.gate_lr * g).clamp(-reg.step_clip, reg.step_clip);
    let mut k = 0;
    for (layer, lg) in layers.iter_mut().zip(&grads.layers) {
        let Some(gate) = layer.gate_mut() else { continue };
        let rg = &reg_grads[k];
        k += 1;
        if gate.learn_w {
            let loss_w = lg.as_ref().map(|g| g.gate_w.as_slice()).unwrap_or(&[]);
            for (j, w) in gate.w.iter_mut().enumerate() {
                *w += gate_step(loss_w.get(j).copied().unwrap_or(0.0) + rg.w[j]);
            }
        }
        clip_gates(gate);
    }
    let mut k = 0;
    for (layer, lg) in layers.iter_mut().zip(&grads.layers) {
        let Some(gate) = layer.gate_mut() else { continue };
        let rg = &reg_grads[k];
        k += 1;
        if gate.learn_d {
            gate.d += gate_step(lg.as_ref().map_or(0.0, |g| g.gate_d) + rg.d);
        }
        clip_gates(gate);
    }
    Ok(())
}

/// `v ← μv − lr·g`, rounded to `f32`; None if `θ + v` would be non-finite.
fn update_velocity(v: &mut [f64], g: &[f64], theta: &[f64], s: StepSizes) -> Option<()> {
    for ((v, g), t) in v.iter_mut().zip(g).zip(theta) {
        *v = (s.momentum * *v - s.lr * g) as f32 as f64;
        if !(*t + *v).is_finite() || !((*t + *v) as f32).is_finite() {
            return None;
        }
    }
    Some(())
}

fn apply(theta: &mut [f64], v: &[f64]) {
    for (t, v) in theta.iter_mut().zip(v) {
        *t = (*t + v) as f32 as f64;
    }
}
