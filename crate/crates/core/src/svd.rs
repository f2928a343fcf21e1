//! Singular value decomposition by one-sided Jacobi (Hestenes) rotations.
//!
//! For `m: p×q` with `p ≥ q` the columns of a working copy are rotated in
//! pairs until every pair is orthogonal to within `OFF_DIAGONAL_TOL`
//! (measured as `|a_i·a_j| / (‖a_i‖‖a_j‖)`); the accumulated rotations form
//! `V`, the column norms are the singular values and the normalised columns
//! form `U`. Wide inputs are handled through the transpose. Left singular
//! vectors for (numerically) zero singular values are completed to an
//! orthonormal set by Gram–Schmidt against the unit vectors.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

/// Maximum number of full sweeps over all column pairs.
pub const MAX_SWEEPS: usize = 60;
/// Convergence threshold on the normalised off-diagonal inner products.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Thin SVD factors: `m ≈ u · diag(s) · vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `p×k`, orthonormal columns.
    pub u: Tensor,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `q×k`, orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let (p, k) = (self.u.shape()[0], self.u.shape()[1]);
        let q = self.v.shape()[0];
        let mut us = self.u.data().to_vec();
        for i in 0..p {
            for j in 0..k {
                us[i * k + j] *= self.s[j];
            }
        }
        let mut vt = vec![0.0; k * q];
        crate::tensor::transpose_into(self.v.data(), q, k, &mut vt);
        let mut out = vec![0.0; p * q];
        crate::tensor::gemm_acc(p, k, q, &us, &vt, &mut out);
        Tensor::new(vec![p, q], out).expect("shape")
    }
}

/// Rank-`k` truncated SVD of a matrix.
pub fn svd_truncate(m: &Tensor, rank: usize) -> Result<Svd> {
    if m.shape().len() != 2 {
        return Err(Error::Dimension { op: "svd_truncate", left: m.shape().to_vec(), right: vec![] });
    }
    let (p, q) = (m.shape()[0], m.shape()[1]);
    let max = p.min(q);
    if rank == 0 || rank > max {
        return Err(Error::Rank { rank, max });
    }
    if !m.is_finite() {
        return Err(Error::Domain("svd input contains non-finite values".into()));
    }
    let full = if p >= q {
        jacobi_tall(m.data(), p, q)?
    } else {
        let t = m.transpose()?;
        let (u, s, v) = jacobi_tall(t.data(), q, p)?;
        (v, s, u)
    };
    let (u_full, s_full, v_full) = full;
    // u_full: p×max, v_full: q×max, both row-major
    let take = |src: &[f64], rows: usize| -> Tensor {
        let mut out = Vec::with_capacity(rows * rank);
        for r in 0..rows {
            out.extend_from_slice(&src[r * max..r * max + rank]);
        }
        Tensor::new(vec![rows, rank], out).expect("shape")
    };
    Ok(Svd { u: take(&u_full, p), s: s_full[..rank].to_vec(), v: take(&v_full, q) })
}

/// Full thin SVD of a tall `p×q` (p ≥ q) row-major matrix.
/// Returns (`u` p×q, `s` len q, `v` q×q), row-major, sorted by `s` descending.
#[allow(clippy::type_complexity)]
fn jacobi_tall(data: &[f64], p: usize, q: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    // column-major working copies: cols[j] is column j
    let mut cols: Vec<Vec<f64>> = (0..q).map(|j| (0..p).map(|i| data[i * q + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = q < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0f64;
        for i in 0..q {
            for j in (i + 1)..q {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols[i], &cols[j]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for r in 0..p {
                        alpha += a[r] * a[r];
                        beta += b[r] * b[r];
                        gamma += a[r] * b[r];
                    }
                    (alpha, beta, gamma)
                };
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / libm::sqrt(alpha * beta);
                residual = residual.max(off);
                if off <= OFF_DIAGONAL_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if residual <= OFF_DIAGONAL_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::IterationLimit { sweeps: MAX_SWEEPS, residual });
    }

    let norms: Vec<f64> = cols.iter().map(|c| libm::sqrt(c.iter().map(|v| v * v).sum())).collect();
    let mut order: Vec<usize> = (0..q).collect();
    // stable sort keeps equal singular values in column order
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite"));

    let smax = norms.iter().copied().fold(0.0, f64::max);
    let negligible = smax * (p.max(q) as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut s = Vec::with_capacity(q);
    let mut deficient = Vec::new();
    for (rank_pos, &j) in order.iter().enumerate() {
        if norms[j] > negligible {
            u_cols.push(cols[j].iter().map(|v| v / norms[j]).collect());
            s.push(norms[j]);
        } else {
            u_cols.push(vec![0.0; p]);
            s.push(0.0);
            deficient.push(rank_pos);
        }
    }
    for &pos in &deficient {
        u_cols[pos] = orthonormal_complement(&u_cols, pos, p);
    }

    let mut u = vec![0.0; p * q];
    let mut v = vec![0.0; q * q];
    for (k, &j) in order.iter().enumerate() {
        for r in 0..p {
            u[r * q + k] = u_cols[k][r];
        }
        for r in 0..q {
            v[r * q + k] = vcols[j][r];
        }
    }
    Ok((u, s, v))
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (a, b) = (&mut lo[i], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// A unit vector orthogonal to every non-zero column in `cols` other than `skip`.
fn orthonormal_complement(cols: &[Vec<f64>], skip: usize, p: usize) -> Vec<f64> {
    for e in 0..p {
        let mut v = vec![0.0; p];
        v[e] = 1.0;
        // two Gram–Schmidt passes
        for _ in 0..2 {
            for (idx, c) in cols.iter().enumerate() {
                if idx == skip {
                    continue;
                }
                let dot: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, cv) in v.iter_mut().zip(c) {
                    *x -= dot * cv;
                }
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 0.5 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
    vec![0.0; p]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SeededRng;

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
    }

    fn gram_error(t: &Tensor) -> f64 {
        let g = t.transpose().unwrap().matmul(t).unwrap();
        g.max_abs_diff(&Tensor::identity(t.shape()[1])).unwrap()
    }

    #[test]
    fn diagonal_matrix() {
        let m = Tensor::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let svd = svd_truncate(&m, 2).unwrap();
        assert_eq!(svd.s, vec![3.0, 2.0]);
        let err = m.sub(&svd.reconstruct()).unwrap().frobenius_norm();
        assert!((err - 1.0).abs() < 1e-12, "{err}");
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.7, -1.1];
        let data = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let m = Tensor::new(vec![4, 3], data).unwrap();
        let svd = svd_truncate(&m, 1).unwrap();
        assert!(m.max_abs_diff(&svd.reconstruct()).unwrap() < 1e-8);
    }

    #[test]
    fn full_rank_reconstructs_tall_and_wide() {
        let mut rng = SeededRng::new(2);
        for &(p, q) in &[(8, 5), (5, 8), (6, 6), (1, 4), (4, 1)] {
            let m = random(&mut rng, p, q);
            let svd = svd_truncate(&m, p.min(q)).unwrap();
            let rel = m.sub(&svd.reconstruct()).unwrap().frobenius_norm() / m.frobenius_norm();
            assert!(rel < 1e-6, "{p}x{q}: {rel}");
            assert!(gram_error(&svd.u) < 1e-6 && gram_error(&svd.v) < 1e-6);
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]) && svd.s.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn rank_deficient_completes_orthonormal_u() {
        // two identical columns plus a zero column
        let m = Tensor::from_rows(&[&[1.0, 1.0, 0.0], &[2.0, 2.0, 0.0], &[0.0, 0.0, 0.0], &[1.0, 1.0, 0.0]]).unwrap();
        let svd = svd_truncate(&m, 3).unwrap();
        assert!(svd.s[1].abs() < 1e-12 && svd.s[2] == 0.0);
        assert!(gram_error(&svd.u) < 1e-6);
        assert!(m.max_abs_diff(&svd.reconstruct()).unwrap() < 1e-12);
    }

    #[test]
    fn rank_bounds() {
        let m = Tensor::zeros(&[3, 2]);
        assert_eq!(svd_truncate(&m, 0), Err(Error::Rank { rank: 0, max: 2 }));
        assert_eq!(svd_truncate(&m, 3), Err(Error::Rank { rank: 3, max: 2 }));
        let zero = svd_truncate(&m, 2).unwrap();
        assert_eq!(zero.s, vec![0.0, 0.0]);
    }

    #[test]
    fn nan_rejected() {
        let m = Tensor::new(vec![2, 2], vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert!(matches!(svd_truncate(&m, 1), Err(Error::Domain(_))));
    }
}
