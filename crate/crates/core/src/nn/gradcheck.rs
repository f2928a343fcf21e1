use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::layer::Layer;
use super::loss::softmax_xent;
use super::network::Network;
use crate::{Result, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// Worst relative error within one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    /// e.g. `layer2.weights`
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares backpropagated weight and bias gradients with central differences.
///
/// The relative error of one parameter is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
/// Gate parameters are not checked here: binarization makes the loss
/// piecewise constant in them.
pub fn grad_check(net: &Network, batch: &Tensor, labels: &[usize], tol: f64) -> Result<GradCheckReport> {
    let (_, cache) = net.forward(batch)?;
    let grads = net.backward(&cache, labels)?;
    let mut probe = net.clone();
    let mut groups = Vec::new();
    for idx in 0..net.layers().len() {
        let Some(g) = &grads.layers[idx] else { continue };
        let mut sets: Vec<(&str, &[f64])> = Vec::from([("weights", g.weights.as_slice())]);
        if let Some(b) = &g.bias {
            sets.push(("bias", b.as_slice()));
        }
        for (kind, analytic) in sets {
            let mut worst = 0.0f64;
            for (p, &a) in analytic.iter().enumerate() {
                let orig = param(&mut probe, idx, kind, p, None);
                param(&mut probe, idx, kind, p, Some(orig + STEP));
                let plus = loss(&probe, batch, labels)?;
                param(&mut probe, idx, kind, p, Some(orig - STEP));
                let minus = loss(&probe, batch, labels)?;
                param(&mut probe, idx, kind, p, Some(orig));
                let numeric = (plus - minus) / (2.0 * STEP);
                let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
                worst = worst.max((a - numeric).abs() / denom);
            }
            groups.push(GroupError {
                name: format!("layer{idx}.{kind}"),
                params: analytic.len(),
                max_rel_error: worst,
                passed: worst < tol,
            });
        }
    }
    Ok(GradCheckReport { groups })
}

fn loss(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(softmax_xent(&net.logits(batch)?, labels)?.0)
}

/// Reads parameter `p` of `kind` in layer `idx`, optionally overwriting it.
fn param(net: &mut Network, idx: usize, kind: &str, p: usize, set: Option<f64>) -> f64 {
    let slot = match (&mut net.layers_mut()[idx], kind) {
        (Layer::Dense(l), "weights") => &mut l.weights.data_mut()[p],
        (Layer::Dense(l), _) => &mut l.bias.as_mut().expect("bias")[p],
        (Layer::Conv(l), "weights") => &mut l.kernels.data_mut()[p],
        (Layer::Conv(l), _) => &mut l.bias[p],
        (Layer::Pool(_), _) => unreachable!("pool layers have no parameters"),
    };
    let old = *slot;
    if let Some(v) = set {
        *slot = v;
    }
    old
}
