use alloc::format;
use alloc::vec;

use crate::{Error, Result, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
///
/// Each row is shifted by its maximum before exponentiation. The returned
/// gradient is `(softmax - onehot) / B`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Dimension { op: "softmax_xent", left: logits.shape().to_vec(), right: vec![labels.len()] });
    }
    let (b, c) = (logits.rows(), logits.cols());
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Domain(format!("label {bad} out of range for {c} classes")));
    }
    let inv_b = 1.0 / b as f64;
    let mut grad = vec![0.0; b * c];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = &mut grad[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = libm::exp(z - max);
            sum += *gj;
        }
        total += max + libm::log(sum) - row[label];
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((total * inv_b, Tensor::new(vec![b, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SeededRng;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::new(vec![3, 10], vec![0.7; 30]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - core::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits() {
        let mut data = vec![0.0; 10];
        data[3] = 1000.0;
        let logits = Tensor::new(vec![1, 10], data).unwrap();
        let (loss, _) = softmax_xent(&logits, &[3]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = SeededRng::new(8);
        let data: alloc::vec::Vec<f64> = (0..12).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let logits = Tensor::new(vec![4, 3], data.clone()).unwrap();
        let labels = [2, 0, 1, 1];
        let (loss, grad) = softmax_xent(&logits, &labels).unwrap();
        // unshifted textbook formula
        let mut want = 0.0;
        for i in 0..4 {
            let row = &data[i * 3..i * 3 + 3];
            let z: f64 = row.iter().map(|v| libm::exp(*v)).sum();
            want += -libm::log(libm::exp(row[labels[i]]) / z);
            for j in 0..3 {
                let p = libm::exp(row[j]) / z - if j == labels[i] { 1.0 } else { 0.0 };
                assert!((grad.at(i, j) - p / 4.0).abs() < 1e-10);
            }
        }
        assert!((loss - want / 4.0).abs() < 1e-10);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(softmax_xent(&logits, &[3]), Err(Error::Domain(_))));
    }
}
