//! Gate regularizers and their gradients.
//!
//! Binarizing term: `λ₁ Σ w(1-w) + λ₂ Σ d(1-d)`, zero exactly when every gate
//! is 0 or 1. Complexity term: `λ₃ Σ_i h_i·1(d_i < 0.5) - λ₄ Σ_i d_i` with
//! `h_i = Σ_j w_ij`; the indicator is treated as a constant when
//! differentiating with respect to `d`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::GateParams;

/// Regularization weights and the per-step gate update bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    /// Width binarizer weight.
    pub lambda1: f64,
    /// Depth binarizer weight.
    pub lambda2: f64,
    /// Width complexity weight.
    pub lambda3: f64,
    /// Depth (linearity) reward weight.
    pub lambda4: f64,
    /// Largest absolute change of any gate in one update.
    #[serde(default = "default_step_clip")]
    pub step_clip: f64,
}

pub const DEFAULT_STEP_CLIP: f64 = 0.1;

fn default_step_clip() -> f64 {
    DEFAULT_STEP_CLIP
}

impl RegConfig {
    /// All weights zero: plain training.
    pub fn none() -> Self {
        Self { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, step_clip: DEFAULT_STEP_CLIP }
    }

    pub fn is_valid(&self) -> bool {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4].iter().all(|l| l.is_finite() && *l >= 0.0)
            && self.step_clip > 0.0
    }
}

/// The two binarizing terms, already multiplied by `λ₁` and `λ₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinarizingPenalty {
    pub width: f64,
    pub depth: f64,
}

impl BinarizingPenalty {
    pub fn total(&self) -> f64 {
        self.width + self.depth
    }
}

pub fn binarizing_penalty<'a>(gates: impl IntoIterator<Item = &'a GateParams>, cfg: &RegConfig) -> BinarizingPenalty {
    let mut width = 0.0;
    let mut depth = 0.0;
    for g in gates {
        width += g.w.iter().map(|w| w * (1.0 - w)).sum::<f64>();
        depth += g.d * (1.0 - g.d);
    }
    BinarizingPenalty { width: cfg.lambda1 * width, depth: cfg.lambda2 * depth }
}

/// Soft width `h = Σ_j w_j`.
pub fn effective_width(w: &[f64]) -> f64 {
    w.iter().sum()
}

pub fn model_complexity_penalty<'a>(gates: impl IntoIterator<Item = &'a GateParams>, cfg: &RegConfig) -> f64 {
    let mut width = 0.0;
    let mut depth = 0.0;
    for g in gates {
        if g.d < 0.5 {
            width += effective_width(&g.w);
        }
        depth += g.d;
    }
    cfg.lambda3 * width - cfg.lambda4 * depth
}

/// Regularizer gradient for one layer's gates.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGrad {
    pub w: Vec<f64>,
    pub d: f64,
}

/// `∂/∂w_ij = λ₁(1 - 2w_ij) + λ₃·1(d_i < 0.5)`, `∂/∂d_i = λ₂(1 - 2d_i) - λ₄`,
/// one entry per gate set in iteration order.
pub fn regularizer_grads<'a>(gates: impl IntoIterator<Item = &'a GateParams>, cfg: &RegConfig) -> Vec<GateGrad> {
    gates
        .into_iter()
        .map(|g| {
            let width_term = if g.d < 0.5 { cfg.lambda3 } else { 0.0 };
            GateGrad {
                w: g.w.iter().map(|w| cfg.lambda1 * (1.0 - 2.0 * w) + width_term).collect(),
                d: cfg.lambda2 * (1.0 - 2.0 * g.d) - cfg.lambda4,
            }
        })
        .collect()
}

/// Projects every gate value onto `[0, 1]`.
pub fn clip_gates(g: &mut GateParams) {
    g.w.iter_mut().for_each(|w| *w = w.clamp(0.0, 1.0));
    g.d = g.d.clamp(0.0, 1.0);
}
