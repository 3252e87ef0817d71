//! Top-k singular triplets by power iteration with deflation, and the
//! truncated-SVD projection onto the rank-r matrix set.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{Real, TensorData};

/// Convergence tolerance on the normalized Gram residual.
const TOL: f64 = 1e-10;
/// Iteration cap per singular vector.
const MAX_ITERS: usize = 1000;
/// Acceptable relative Rayleigh-value movement at the iteration cap.
///
/// Clustered values deep in a spectrum make the residual criterion
/// unreachable (the iterate rotates inside the near-degenerate subspace),
/// while the value itself — which is monotone under power iteration on the
/// Gram operator — settles to far better than this bound. The cap therefore
/// only counts as a failure when the value is still moving.
const STALL_TOL: f64 = 1e-6;

/// Descending singular values with orthonormal singular vector columns.
#[derive(Clone, Debug)]
pub struct SvdResult<T> {
    pub values: Vec<T>,
    /// Left vectors, `h x k` (column `i` pairs with `values[i]`).
    pub u: TensorData<T>,
    /// Right vectors, `w x k`.
    pub v: TensorData<T>,
}

impl<T: Real> SvdResult<T> {
    /// `U diag(values) V^T`.
    pub fn reconstruct(&self) -> TensorData<T> {
        let (h, k) = (self.u.rows(), self.values.len());
        let mut scaled = TensorData::zeros(vec![h, k]).expect("sized");
        for i in 0..h {
            for j in 0..k {
                *scaled.at2_mut(i, j) = self.u.at2(i, j) * self.values[j];
            }
        }
        linalg::mat_mul_bt(&scaled, &self.v)
    }
}

/// A unit vector orthogonal to every row of `basis`, built from canonical
/// basis vectors. Exists whenever `basis.len() < dim`.
fn complement_vector<T: Real>(basis: &[Vec<T>], dim: usize) -> Vec<T> {
    for j in 0..dim {
        let mut v = vec![T::zero(); dim];
        v[j] = T::one();
        if linalg::orthonormalize_against(&mut v, basis).is_some() {
            return v;
        }
    }
    unreachable!("no orthogonal complement in dimension {}", dim)
}

/// Top-k singular triplets of a rank-2 tensor.
///
/// Each triplet comes from power iteration on the Gram operator of the
/// deflated matrix, re-orthogonalized against previously found vectors;
/// convergence is declared when the Gram residual `||A^T A v - lambda v||`
/// drops below `1e-10` times the leading eigenvalue.
pub fn svd_topk<T: Real>(mat: &TensorData<T>, k: usize) -> Result<SvdResult<T>> {
    let (h, w) = (mat.rows(), mat.cols());
    let max_k = h.min(w);
    if k == 0 || k > max_k {
        return Err(Error::RankTooLarge { rank: k, max: max_k });
    }

    let fro0 = linalg::fro_norm_sq(mat).as_f64().sqrt().max(1e-300);
    let mut deflated = mat.clone();
    let mut sigmas: Vec<T> = Vec::with_capacity(k);
    let mut us: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut vs: Vec<Vec<T>> = Vec::with_capacity(k);
    // Reference scale for the residual test: the top Gram eigenvalue.
    let mut lambda_ref = 0.0f64;

    for index in 0..k {
        let residual_mass = linalg::fro_norm_sq(&deflated).as_f64().sqrt();
        if residual_mass <= 1e-14 * fro0 {
            // Everything that remains is numerically zero.
            let v = complement_vector(&vs, w);
            let u = complement_vector(&us, h);
            vs.push(v);
            us.push(u);
            sigmas.push(T::zero());
            continue;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0x5d5d_0000 + index as u64);
        let mut v: Vec<T> = (0..w)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(g)
            })
            .collect();
        if linalg::orthonormalize_against(&mut v, &vs).is_none() {
            v = complement_vector(&vs, w);
        }

        let mut converged = false;
        let mut lambda_prev = f64::NEG_INFINITY;
        let mut increment = f64::INFINITY;
        for _ in 0..MAX_ITERS {
            let av = linalg::mat_vec(&deflated, &v);
            let mut atav = linalg::mat_t_vec(&deflated, &av);
            let lambda = linalg::dot(&v, &atav).as_f64();
            if index == 0 {
                lambda_ref = lambda_ref.max(lambda);
            }
            let scale = lambda_ref.max(lambda).max(1e-300);

            let mut resid_sq = T::zero();
            for (ai, &vi) in atav.iter().zip(&v) {
                let d = *ai - T::from_f64(lambda) * vi;
                resid_sq = resid_sq + d * d;
            }
            let done = resid_sq.as_f64().sqrt() <= TOL * scale;
            increment = (lambda - lambda_prev).abs() / scale;
            lambda_prev = lambda;

            if linalg::orthonormalize_against(&mut atav, &vs).is_none() {
                // The iterate collapsed into the span of earlier vectors;
                // restart from a fresh orthogonal direction.
                atav = complement_vector(&vs, w);
            }
            v = atav;
            if done {
                converged = true;
                break;
            }
        }
        if !converged && increment > STALL_TOL {
            return Err(Error::SvdNoConvergence { index });
        }

        let av = linalg::mat_vec(&deflated, &v);
        let sigma = linalg::norm2(&av);
        if sigma.as_f64() <= 1e-14 * fro0 {
            let u = complement_vector(&us, h);
            vs.push(v);
            us.push(u);
            sigmas.push(T::zero());
            continue;
        }
        let mut u: Vec<T> = av.iter().map(|&x| x / sigma).collect();
        if linalg::orthonormalize_against(&mut u, &us).is_none() {
            u = complement_vector(&us, h);
        }

        // Deflate: A <- A - sigma * u v^T.
        for i in 0..h {
            for j in 0..w {
                let upd = sigma * u[i] * v[j];
                *deflated.at2_mut(i, j) = deflated.at2(i, j) - upd;
            }
        }
        sigmas.push(sigma);
        us.push(u);
        vs.push(v);
    }

    // Deflation order already yields non-increasing values up to noise, but
    // enforce the sorted contract exactly.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigmas[b].partial_cmp(&sigmas[a]).expect("finite"));

    let mut u = TensorData::zeros(vec![h, k])?;
    let mut v = TensorData::zeros(vec![w, k])?;
    let mut values = Vec::with_capacity(k);
    for (col, &src) in order.iter().enumerate() {
        values.push(sigmas[src]);
        for i in 0..h {
            *u.at2_mut(i, col) = us[src][i];
        }
        for j in 0..w {
            *v.at2_mut(j, col) = vs[src][j];
        }
    }
    Ok(SvdResult { values, u, v })
}

/// Best rank-r approximation in Frobenius norm (truncated SVD). `r` equal to
/// the full rank returns the input unchanged.
pub fn low_rank_project<T: Real>(mat: &TensorData<T>, r: usize) -> Result<TensorData<T>> {
    let max_r = mat.rows().min(mat.cols());
    if r == 0 || r > max_r {
        return Err(Error::RankTooLarge { rank: r, max: max_r });
    }
    if r == max_r {
        return Ok(mat.clone());
    }
    Ok(svd_topk(mat, r)?.reconstruct())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(h: usize, w: usize, seed: u64) -> TensorData<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        TensorData::matrix(h, w, data).unwrap()
    }

    fn orthonormal_defect(m: &TensorData<f64>) -> f64 {
        // columns: M^T M - E
        let gram = linalg::mat_mul_at(m, m);
        let k = gram.rows();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let e = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.at2(i, j) - e).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_matrix_values() {
        let mut m = TensorData::zeros(vec![3, 3]).unwrap();
        *m.at2_mut(0, 0) = 3.0;
        *m.at2_mut(1, 1) = 2.0;
        *m.at2_mut(2, 2) = 1.0;
        let svd = svd_topk(&m, 3).unwrap();
        let got: Vec<f64> = svd.values.clone();
        for (g, e) in got.iter().zip(&[3.0, 2.0, 1.0]) {
            assert!((g - e).abs() < 1e-9, "values {got:?}");
        }
    }

    #[test]
    fn rank_one_sigma_is_norm_product() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 4.0];
        let mut m = TensorData::zeros(vec![3, 2]).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                *m.at2_mut(i, j) = u[i] * v[j];
            }
        }
        let svd = svd_topk(&m, 1).unwrap();
        let expected = (u.iter().map(|x| x * x).sum::<f64>()
            * v.iter().map(|x| x * x).sum::<f64>())
        .sqrt();
        assert!((svd.values[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn full_decomposition_reconstructs() {
        let m = random_matrix(8, 8, 4);
        let svd = svd_topk(&m, 8).unwrap();
        let rec = svd.reconstruct();
        let max_diff = rec
            .data()
            .iter()
            .zip(m.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "reconstruction off by {max_diff}");
        assert!(orthonormal_defect(&svd.u) < 1e-8);
        assert!(orthonormal_defect(&svd.v) < 1e-8);
    }

    #[test]
    fn tied_spectrum_converges() {
        let m = TensorData::<f64>::identity(5).unwrap();
        let svd = svd_topk(&m, 5).unwrap();
        for v in &svd.values {
            assert!((v - 1.0).abs() < 1e-9);
        }
        assert!(orthonormal_defect(&svd.u) < 1e-8);
    }

    #[test]
    fn values_sorted_and_nonnegative() {
        let m = random_matrix(9, 6, 11);
        let svd = svd_topk(&m, 6).unwrap();
        for w in svd.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(svd.values.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn rank_one_input_projects_to_itself() {
        let m = {
            let mut m = TensorData::zeros(vec![4, 3]).unwrap();
            for i in 0..4 {
                for j in 0..3 {
                    *m.at2_mut(i, j) = ((i + 1) * (j + 2)) as f64;
                }
            }
            m
        };
        let p = low_rank_project(&m, 1).unwrap();
        let max_diff = p
            .data()
            .iter()
            .zip(m.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9, "rank-1 projection off by {max_diff}");
    }

    #[test]
    fn full_rank_projection_is_identity() {
        let m = random_matrix(5, 7, 2);
        assert_eq!(low_rank_project(&m, 5).unwrap(), m);
        assert!(matches!(
            low_rank_project(&m, 6),
            Err(Error::RankTooLarge { rank: 6, max: 5 })
        ));
    }

    #[test]
    fn zero_rows_get_orthonormal_fill() {
        // rank-2 matrix asked for 4 triplets: trailing sigmas must be 0 with
        // vectors still orthonormal.
        let a = random_matrix(4, 2, 8);
        let b = random_matrix(2, 5, 9);
        let m = linalg::mat_mul(&a, &b);
        let svd = svd_topk(&m, 4).unwrap();
        assert!(svd.values[2].abs() < 1e-9);
        assert!(svd.values[3].abs() < 1e-9);
        assert!(orthonormal_defect(&svd.u) < 1e-8);
        assert!(orthonormal_defect(&svd.v) < 1e-8);
    }
}
