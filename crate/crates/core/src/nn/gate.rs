//! Tri-state ReLU gates.
//!
//! A gated unit computes `w'·x` for `x ≥ 0` and `w'·d'·x` otherwise, where
//! `w'` and `d'` are the thresholded gate values. The three reachable states
//! are the zero map (`w' = 0`), ReLU (`w' = 1, d' = 0`) and identity
//! (`w' = 1, d' = 1`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Threshold a gate value: `true` iff `v ≥ 0.5`.
///
/// Values outside `[0, 1]` (or NaN) mean clipping was skipped somewhere and
/// are reported as a domain error.
pub fn binarize(v: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("gate value {v} outside [0, 1]")));
    }
    Ok(v >= 0.5)
}

/// Tri-state ReLU with already-binarized gates.
#[inline]
pub fn tsrelu_apply(x: f64, w: bool, d: bool) -> f64 {
    if !w {
        0.0
    } else if x >= 0.0 || d {
        x
    } else {
        0.0
    }
}

/// Trainable gate parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// One width gate per neuron (dense) or per feature map (conv).
    pub w: Vec<f64>,
    /// Depth gate shared by the layer.
    pub d: f64,
    pub learn_w: bool,
    pub learn_d: bool,
}

impl GateParams {
    pub fn new(width: usize, w0: f64, d0: f64) -> Self {
        Self { w: vec![w0; width], d: d0, learn_w: true, learn_d: true }
    }

    /// Gates of a plain ReLU layer that are never trained.
    pub fn frozen_relu(width: usize) -> Self {
        Self { w: vec![1.0; width], d: 0.0, learn_w: false, learn_d: false }
    }

    pub fn width(&self) -> usize {
        self.w.len()
    }

    pub fn binarized(&self) -> Result<BinaryGates> {
        Ok(BinaryGates { w: self.w.iter().map(|&v| binarize(v)).collect::<Result<_>>()?, d: binarize(self.d)? })
    }

    /// Number of units whose binarized gate is on.
    pub fn active(&self) -> usize {
        self.w.iter().filter(|&&v| v >= 0.5).count()
    }
}

/// Thresholded gate values actually used by a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGates {
    pub w: Vec<bool>,
    pub d: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold() {
        assert_eq!(binarize(0.5), Ok(true));
        assert_eq!(binarize(0.49), Ok(false));
        assert_eq!(binarize(1.0), Ok(true));
        assert_eq!(binarize(0.0), Ok(false));
        assert!(binarize(1.0001).is_err());
        assert!(binarize(-0.1).is_err());
        assert!(binarize(f64::NAN).is_err());
    }

    #[test]
    fn three_states() {
        assert_eq!(tsrelu_apply(2.0, true, false), 2.0);
        assert_eq!(tsrelu_apply(-3.0, true, true), -3.0);
        assert_eq!(tsrelu_apply(-3.0, true, false), 0.0);
        assert_eq!(tsrelu_apply(5.0, false, false), 0.0);
        assert_eq!(tsrelu_apply(5.0, false, true), 0.0);
    }

    #[test]
    fn reductions_hold_for_many_inputs() {
        for i in -50..=50 {
            let x = i as f64 * 0.37;
            assert_eq!(tsrelu_apply(x, true, false), x.max(0.0));
            assert_eq!(tsrelu_apply(x, true, true), x);
            assert_eq!(tsrelu_apply(x, false, true), 0.0);
        }
    }
}
