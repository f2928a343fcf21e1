//! Regularization weight heuristics.

use super::regularizer::{RegConfig, DEFAULT_STEP_CLIP};

/// Ratio `λ₁ / λ₃`. Large enough that a gate parked at 1 is held there unless
/// the loss gradient pushes it below `0.5 + λ₃ / 2λ₁ = 0.7`.
pub const WIDTH_BINARIZE_RATIO: f64 = 2.5;

/// Scales a reference `λ₃` (tuned for a layer of `reference_width` units) to
/// the widest layer of `phi`, and derives the other weights from it:
/// `λ₁ = 2.5 λ₃`, `λ₂ = λ₁ / 10`, `λ₄ = λ₃ / 10`.
pub fn suggest_lambdas(phi: &[usize], reference_width: usize, base_lambda3: f64) -> RegConfig {
    suggest_lambdas_with_ratio(phi, reference_width, base_lambda3, WIDTH_BINARIZE_RATIO)
}

/// As [`suggest_lambdas`] with an explicit `λ₁ / λ₃` ratio.
pub fn suggest_lambdas_with_ratio(phi: &[usize], reference_width: usize, base_lambda3: f64, ratio: f64) -> RegConfig {
    let max_width = phi.iter().copied().max().unwrap_or(1).max(1);
    let lambda3 = base_lambda3 * reference_width as f64 / max_width as f64;
    let lambda1 = ratio * lambda3;
    RegConfig { lambda1, lambda2: lambda1 / 10.0, lambda3, lambda4: lambda3 / 10.0, step_clip: DEFAULT_STEP_CLIP }
}

/// Size of an architecture as the sum of its widths.
pub fn complexity_norm(phi: &[usize]) -> usize {
    phi.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales_inversely_with_max_width() {
        let c = suggest_lambdas(&[20, 5000, 10], 500, 1e-5);
        assert!((c.lambda3 - 1e-6).abs() < 1e-20);
        let c = suggest_lambdas(&[20, 50, 500, 10], 500, 1e-5);
        assert!((c.lambda3 - 1e-5).abs() < 1e-20);
        assert!((c.lambda1 - 2.5e-5).abs() < 1e-20);
        assert!((c.lambda2 - 2.5e-6).abs() < 1e-20);
        assert!((c.lambda4 - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn norm_is_sum_of_widths() {
        assert_eq!(complexity_norm(&[20, 50, 500, 10]), 580);
        assert_eq!(complexity_norm(&[]), 0);
        assert_eq!(complexity_norm(&[16, 26, 10]), 52);
    }
}
