//! Model-based reference solver: variable splitting with majorized updates
//! and a truncated-SVD rank projection in place of the learned low-rank
//! module. Serves as the math oracle for the unfolded network.
//!
//! The smooth prior is fixed to `G(x) = 0.5 * ||Dx||_F^2` with `D` the
//! horizontal+vertical forward-difference operator (zero-padded boundary),
//! so every derivation step is exactly checkable.

mod svd;

pub use svd::{low_rank_project, svd_topk, SvdResult};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::StageParams;
use crate::sensing::{MeasurementOperator, BLOCK, BLOCK_LEN};
use crate::tensor::{Real, TensorData};

/// Exact Lipschitz bound for the gradient of the difference prior: the Gram
/// operator `D^T D` of the 2-D forward-difference stack has spectrum in
/// `[0, 8)`.
pub const PRIOR_LIPSCHITZ: f64 = 8.0;

/// Penalty constants of the unconstrained split cost plus iteration budget
/// and projection rank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverHyper {
    pub lambda: f64,
    pub mu: f64,
    pub beta: f64,
    pub l1: f64,
    pub l2: f64,
    pub iterations: usize,
    pub rank: usize,
}

impl SolverHyper {
    pub fn new(
        lambda: f64,
        mu: f64,
        beta: f64,
        l1: f64,
        l2: f64,
        iterations: usize,
        rank: usize,
    ) -> Result<Self> {
        if !(lambda >= 0.0 && mu >= 0.0) {
            return Err(Error::InvalidHyper("lambda and mu must be non-negative"));
        }
        if !(beta > 0.0 && l1 > 0.0 && l2 > 0.0) {
            return Err(Error::InvalidHyper("beta, l1, l2 must be positive"));
        }
        if rank == 0 {
            return Err(Error::InvalidHyper("rank must be at least 1"));
        }
        Ok(Self {
            lambda,
            mu,
            beta,
            l1,
            l2,
            iterations,
            rank,
        })
    }

    /// Fills the Lipschitz constants from the operator: `l1 = sigma_max^2` of
    /// the measurement matrix (computed by power iteration) and the exact
    /// difference-operator bound for `l2`.
    pub fn for_operator(
        lambda: f64,
        mu: f64,
        beta: f64,
        iterations: usize,
        rank: usize,
        op: &MeasurementOperator<f64>,
    ) -> Result<Self> {
        let l1 = sigma_max_sq(op.phi())?;
        Self::new(lambda, mu, beta, l1, rank_bound_l2(), iterations, rank)
    }

    /// `s = l1 + 2*mu + 2*beta`, the normalizer of the combined update.
    pub fn s(&self) -> f64 {
        self.l1 + 2.0 * self.mu + 2.0 * self.beta
    }

    /// The stage scalars the derivation assigns to the unfolded network:
    /// `rho1 = 2*beta/s`, `rho2 = l1/s`, `eta = 1/s`,
    /// `alpha = lambda*l2/(lambda*l2 + beta)`, `gamma = lambda/(lambda*l2 + beta)`.
    pub fn stage_scalars(&self) -> StageParams<f64> {
        let s = self.s();
        let d = self.lambda * self.l2 + self.beta;
        StageParams {
            rho1: 2.0 * self.beta / s,
            rho2: self.l1 / s,
            eta: 1.0 / s,
            alpha: self.lambda * self.l2 / d,
            gamma: self.lambda / d,
        }
    }
}

fn rank_bound_l2() -> f64 {
    PRIOR_LIPSCHITZ
}

/// Largest squared singular value, via the rank-1 power iteration.
pub fn sigma_max_sq(mat: &TensorData<f64>) -> Result<f64> {
    let top = svd_topk(mat, 1)?;
    Ok(top.values[0] * top.values[0])
}

/// Splits an `h x w` image into flattened 33x33 block columns (`1089 x B`),
/// blocks ordered row-major over the grid.
pub fn im_to_blocks<T: Real>(img: &TensorData<T>) -> Result<TensorData<T>> {
    let (h, w) = (img.rows(), img.cols());
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::NotBlockAligned { h, w, block: BLOCK });
    }
    let (gr, gc) = (h / BLOCK, w / BLOCK);
    let nb = gr * gc;
    let mut out = TensorData::zeros(vec![BLOCK_LEN, nb])?;
    for b in 0..nb {
        let (gy, gx) = (b / gc, b % gc);
        for p in 0..BLOCK_LEN {
            let (dy, dx) = (p / BLOCK, p % BLOCK);
            *out.at2_mut(p, b) = img.at2(gy * BLOCK + dy, gx * BLOCK + dx);
        }
    }
    Ok(out)
}

/// Inverse of [`im_to_blocks`].
pub fn blocks_to_im<T: Real>(blocks: &TensorData<T>, grid_rows: usize, grid_cols: usize) -> TensorData<T> {
    let nb = grid_rows * grid_cols;
    debug_assert_eq!(blocks.shape(), &[BLOCK_LEN, nb]);
    let (h, w) = (grid_rows * BLOCK, grid_cols * BLOCK);
    let mut out = TensorData::zeros(vec![h, w]).expect("sized");
    for b in 0..nb {
        let (gy, gx) = (b / grid_cols, b % grid_cols);
        for p in 0..BLOCK_LEN {
            let (dy, dx) = (p / BLOCK, p % BLOCK);
            *out.at2_mut(gy * BLOCK + dy, gx * BLOCK + dx) = blocks.at2(p, b);
        }
    }
    out
}

/// `0.5 * ||Dx||_F^2` for the forward-difference operator with zero-padded
/// boundary (both orientations).
pub fn prior_cost(x: &TensorData<f64>) -> f64 {
    let (h, w) = (x.rows(), x.cols());
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let v = x.at2(i, j);
            let dh = if j + 1 < w { x.at2(i, j + 1) - v } else { -v };
            let dv = if i + 1 < h { x.at2(i + 1, j) - v } else { -v };
            acc += dh * dh + dv * dv;
        }
    }
    0.5 * acc
}

/// `grad G(x) = D^T D x` for the same operator.
pub fn prior_grad(x: &TensorData<f64>) -> TensorData<f64> {
    let (h, w) = (x.rows(), x.cols());
    // Forward differences (zero-padded), then their adjoints.
    let mut dh = TensorData::zeros(vec![h, w]).expect("sized");
    let mut dv = TensorData::zeros(vec![h, w]).expect("sized");
    for i in 0..h {
        for j in 0..w {
            let v = x.at2(i, j);
            *dh.at2_mut(i, j) = if j + 1 < w { x.at2(i, j + 1) - v } else { -v };
            *dv.at2_mut(i, j) = if i + 1 < h { x.at2(i + 1, j) - v } else { -v };
        }
    }
    let mut out = TensorData::zeros(vec![h, w]).expect("sized");
    for i in 0..h {
        for j in 0..w {
            // (Dh^T u)[i, j] = u[i, j-1] - u[i, j]
            let h_adj = (if j > 0 { dh.at2(i, j - 1) } else { 0.0 }) - dh.at2(i, j);
            let v_adj = (if i > 0 { dv.at2(i - 1, j) } else { 0.0 }) - dv.at2(i, j);
            *out.at2_mut(i, j) = h_adj + v_adj;
        }
    }
    out
}

/// The unconstrained split cost
/// `0.5*||Phi z - y||^2 + lambda*G(x) + (mu/2)*||z - l||^2 + (beta/2)*||x - z||^2`
/// with `Phi` applied blockwise.
pub fn surrogate_cost(
    x: &TensorData<f64>,
    z: &TensorData<f64>,
    l: &TensorData<f64>,
    y: &TensorData<f64>,
    op: &MeasurementOperator<f64>,
    hyper: &SolverHyper,
) -> Result<f64> {
    for (name, a, b) in [("x vs z", x, z), ("z vs l", z, l)] {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: match name {
                    "x vs z" => "surrogate_cost x/z",
                    _ => "surrogate_cost z/l",
                },
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let z_blocks = im_to_blocks(z)?;
    if y.shape() != [op.m(), z_blocks.cols()] {
        return Err(Error::ShapeMismatch {
            op: "surrogate_cost y",
            lhs: y.shape().to_vec(),
            rhs: vec![op.m(), z_blocks.cols()],
        });
    }
    let residual = linalg::sub(&linalg::mat_mul(op.phi(), &z_blocks), y);
    let data = 0.5 * linalg::fro_norm_sq(&residual);
    let prox = 0.5 * hyper.mu * linalg::fro_norm_sq(&linalg::sub(z, l));
    let split = 0.5 * hyper.beta * linalg::fro_norm_sq(&linalg::sub(x, z));
    Ok(data + hyper.lambda * prior_cost(x) + prox + split)
}

/// Quadratic upper-bound check for `f(v) = 0.5*||Phi v - y||^2` at `x0`:
/// `f(x) <= f(x0) + <grad f(x0), x - x0> + (l1/2)*||x - x0||^2 + 1e-9`.
///
/// The margin is independent of `y` (it cancels exactly for this quadratic
/// `f`), so the check evaluates with `y = 0`.
pub fn majorization_check(
    op: &MeasurementOperator<f64>,
    x0: &[f64],
    x: &[f64],
    l1: f64,
) -> bool {
    assert_eq!(x0.len(), BLOCK_LEN, "majorization_check expects one block");
    assert_eq!(x.len(), BLOCK_LEN);
    let f = |v: &[f64]| -> f64 {
        let pv = linalg::mat_vec(op.phi(), v);
        0.5 * linalg::dot(&pv, &pv)
    };
    let grad0 = linalg::mat_t_vec(op.phi(), &linalg::mat_vec(op.phi(), x0));
    let mut linear = 0.0;
    let mut dist_sq = 0.0;
    for i in 0..x.len() {
        let d = x[i] - x0[i];
        linear += grad0[i] * d;
        dist_sq += d * d;
    }
    f(x) <= f(x0) + linear + 0.5 * l1 * dist_sq + 1e-9
}

/// Result of a classic solve: the reconstruction and the per-iteration cost.
pub struct SolveOutput {
    pub x: TensorData<f64>,
    pub cost_trace: Vec<f64>,
}

/// Iterates the three majorized updates from `x0 = Phi^T y`:
/// rank-r projection of `z`, the linearized `z`-step, and the prior `x`-step.
/// `observe` sees `(iteration, x, cost)` after each full pass.
///
/// Fails with a diagnostic trace if the cost rises by more than `1e-6` on
/// three consecutive iterations, which indicates invalid Lipschitz bounds.
pub fn solve_with<F>(
    y: &TensorData<f64>,
    op: &MeasurementOperator<f64>,
    hyper: &SolverHyper,
    grid_rows: usize,
    grid_cols: usize,
    mut observe: F,
) -> Result<SolveOutput>
where
    F: FnMut(usize, &TensorData<f64>, f64),
{
    let nb = grid_rows * grid_cols;
    if y.shape() != [op.m(), nb] {
        return Err(Error::ShapeMismatch {
            op: "solve y",
            lhs: y.shape().to_vec(),
            rhs: vec![op.m(), nb],
        });
    }
    let phi_t_y = blocks_to_im(&linalg::mat_mul_at(op.phi(), y), grid_rows, grid_cols);
    let mut x = phi_t_y.clone();
    let mut z = phi_t_y.clone();

    // Standard-form normalizers: the z-step minimizes the l1-majorized data
    // term plus the (mu/2, beta/2) penalties of the split cost, which keeps
    // the recorded cost non-increasing whenever l1, l2 are valid bounds.
    let s_z = hyper.l1 + hyper.mu + hyper.beta;
    let s_x = hyper.lambda * hyper.l2 + hyper.beta;

    let mut cost_trace = Vec::with_capacity(hyper.iterations);
    let mut prev_cost = f64::INFINITY;
    let mut rises = 0usize;

    for iteration in 0..hyper.iterations {
        let l = low_rank_project(&z, hyper.rank)?;

        // z <- (beta*x + l1*z + mu*l - Phi^T Phi z + Phi^T y) / (l1 + mu + beta)
        let z_blocks = im_to_blocks(&z)?;
        let phi_t_phi_z = blocks_to_im(
            &linalg::mat_mul_at(op.phi(), &linalg::mat_mul(op.phi(), &z_blocks)),
            grid_rows,
            grid_cols,
        );
        let mut z_next = TensorData::zeros(vec![x.rows(), x.cols()])?;
        for i in 0..z_next.numel() {
            z_next.data_mut()[i] = (hyper.beta * x.data()[i]
                + hyper.l1 * z.data()[i]
                + hyper.mu * l.data()[i]
                - phi_t_phi_z.data()[i]
                + phi_t_y.data()[i])
                / s_z;
        }
        z = z_next;

        // x <- (lambda*l2*x + beta*z - lambda*grad G(x)) / (lambda*l2 + beta)
        let g = prior_grad(&x);
        let mut x_next = TensorData::zeros(vec![x.rows(), x.cols()])?;
        for i in 0..x_next.numel() {
            x_next.data_mut()[i] = (hyper.lambda * hyper.l2 * x.data()[i]
                + hyper.beta * z.data()[i]
                - hyper.lambda * g.data()[i])
                / s_x;
        }
        x = x_next;

        let cost = surrogate_cost(&x, &z, &l, y, op, hyper)?;
        if cost > prev_cost + 1e-6 {
            rises += 1;
            if rises >= 3 {
                cost_trace.push(cost);
                return Err(Error::Divergence {
                    iteration,
                    trace: cost_trace,
                });
            }
        } else {
            rises = 0;
        }
        prev_cost = cost;
        cost_trace.push(cost);
        observe(iteration, &x, cost);
    }
    Ok(SolveOutput { x, cost_trace })
}

/// [`solve_with`] without an observer.
pub fn solve(
    y: &TensorData<f64>,
    op: &MeasurementOperator<f64>,
    hyper: &SolverHyper,
    grid_rows: usize,
    grid_cols: usize,
) -> Result<SolveOutput> {
    solve_with(y, op, hyper, grid_rows, grid_cols, |_, _, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_image(h: usize, w: usize, seed: u64) -> TensorData<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        TensorData::matrix(h, w, data).unwrap()
    }

    #[test]
    fn block_round_trip() {
        let img = random_image(66, 99, 1);
        let blocks = im_to_blocks(&img).unwrap();
        assert_eq!(blocks.shape(), &[1089, 6]);
        assert_eq!(blocks_to_im(&blocks, 2, 3), img);
    }

    #[test]
    fn prior_grad_matches_finite_differences() {
        let x = random_image(7, 9, 3);
        let g = prior_grad(&x);
        let eps = 1e-6;
        let mut xp = x.clone();
        for i in 0..x.numel() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + eps;
            let plus = prior_cost(&xp);
            xp.data_mut()[i] = orig - eps;
            let minus = prior_cost(&xp);
            xp.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            assert!(
                (numeric - g.data()[i]).abs() < 1e-6,
                "coordinate {i}: numeric {numeric} analytic {}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn prior_gram_spectrum_below_bound() {
        // Rayleigh quotients of D^T D stay below the advertised constant 8.
        for seed in 0..5 {
            let x = random_image(33, 33, 100 + seed);
            let g = prior_grad(&x);
            let quotient = linalg::dot(g.data(), x.data()).abs()
                / linalg::dot(x.data(), x.data());
            assert!(quotient < PRIOR_LIPSCHITZ, "quotient {quotient}");
        }
    }

    #[test]
    fn cost_trivial_cases() {
        let op = MeasurementOperator::<f64>::init(0.25, 5).unwrap();
        let hyper = SolverHyper::new(0.3, 0.2, 0.1, 1.0, 8.0, 1, 4).unwrap();
        let zero = TensorData::zeros(vec![33, 33]).unwrap();
        let y0 = TensorData::zeros(vec![op.m(), 1]).unwrap();
        let c = surrogate_cost(&zero, &zero, &zero, &y0, &op, &hyper).unwrap();
        assert_eq!(c, 0.0);

        // x = z = l and Phi z = y leaves only the prior term.
        let x = random_image(33, 33, 9);
        let y = linalg::mat_mul(op.phi(), &im_to_blocks(&x).unwrap());
        let c = surrogate_cost(&x, &x, &x, &y, &op, &hyper).unwrap();
        let expected = hyper.lambda * prior_cost(&x);
        assert!((c - expected).abs() < 1e-9 * expected.max(1.0));
    }

    #[test]
    fn cost_matches_naive_loop() {
        let op = MeasurementOperator::<f64>::init(0.1, 6).unwrap();
        let hyper = SolverHyper::new(0.7, 0.4, 0.9, 2.0, 8.0, 1, 4).unwrap();
        let x = random_image(33, 66, 10);
        let z = random_image(33, 66, 11);
        let l = random_image(33, 66, 12);
        let y = {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let data = (0..op.m() * 2).map(|_| StandardNormal.sample(&mut rng)).collect();
            TensorData::matrix(op.m(), 2, data).unwrap()
        };
        let fast = surrogate_cost(&x, &z, &l, &y, &op, &hyper).unwrap();

        // Independent scalar-loop evaluation.
        let mut naive = 0.0;
        let z_blocks = im_to_blocks(&z).unwrap();
        for b in 0..2 {
            for r in 0..op.m() {
                let mut acc = 0.0;
                for c in 0..BLOCK_LEN {
                    acc += op.phi().at2(r, c) * z_blocks.at2(c, b);
                }
                let d = acc - y.at2(r, b);
                naive += 0.5 * d * d;
            }
        }
        naive += hyper.lambda * prior_cost(&x);
        for i in 0..z.numel() {
            let dz = z.data()[i] - l.data()[i];
            let dx = x.data()[i] - z.data()[i];
            naive += 0.5 * hyper.mu * dz * dz + 0.5 * hyper.beta * dx * dx;
        }
        let rel = (fast - naive).abs() / naive.abs().max(1.0);
        assert!(rel < 1e-10, "relative difference {rel}");
    }

    #[test]
    fn majorization_trivial_and_tight() {
        let op = MeasurementOperator::<f64>::init(0.25, 21).unwrap();
        let l1 = sigma_max_sq(op.phi()).unwrap();
        let x0: Vec<f64> = random_image(33, 33, 30).into_data();
        // x = x0: equality within slack.
        assert!(majorization_check(&op, &x0, &x0, l1));
        // Tight constant still an upper bound for random displacements.
        for seed in 0..5 {
            let x: Vec<f64> = random_image(33, 33, 40 + seed).into_data();
            assert!(majorization_check(&op, &x0, &x, l1));
        }
    }

    #[test]
    fn majorization_fails_for_undersized_constant() {
        let op = MeasurementOperator::<f64>::init(0.25, 22).unwrap();
        let top = svd_topk(op.phi(), 1).unwrap();
        let l1 = top.values[0] * top.values[0];
        let x0 = vec![0.0; BLOCK_LEN];
        // Displace along the top right-singular vector, where the data term
        // curves exactly at sigma_max^2.
        let x: Vec<f64> = (0..BLOCK_LEN).map(|i| top.v.at2(i, 0)).collect();
        assert!(!majorization_check(&op, &x0, &x, 0.1 * l1));
    }

    #[test]
    fn orthonormal_full_ratio_recovers_signal() {
        // m = n with orthonormal rows and mu = lambda = 0: iterates approach
        // Phi^T y, the exact signal.
        let op = MeasurementOperator::<f64>::init(1.0, 2).unwrap();
        let truth = random_image(33, 33, 50);
        let y = linalg::mat_mul(op.phi(), &im_to_blocks(&truth).unwrap());
        let hyper = SolverHyper::new(0.0, 0.0, 1.0, 1.0 + 1e-9, 8.0, 60, 33).unwrap();
        let out = solve(&y, &op, &hyper, 1, 1).unwrap();
        let err = linalg::fro_norm_sq(&linalg::sub(&out.x, &truth)).sqrt()
            / linalg::fro_norm_sq(&truth).sqrt();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn cost_is_monotone_on_random_instance() {
        let op = MeasurementOperator::<f64>::init(0.25, 33).unwrap();
        let truth = random_image(66, 66, 60);
        let y = linalg::mat_mul(op.phi(), &im_to_blocks(&truth).unwrap());
        let hyper = SolverHyper::for_operator(0.05, 0.05, 0.1, 80, 8, &op).unwrap();
        let out = solve(&y, &op, &hyper, 2, 2).unwrap();
        for w in out.cost_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "cost rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn stage_scalar_formulas() {
        let hyper = SolverHyper::new(0.5, 0.25, 0.75, 2.0, 8.0, 1, 4).unwrap();
        let s = hyper.s();
        assert_eq!(s, 2.0 + 2.0 * 0.25 + 2.0 * 0.75);
        let sc = hyper.stage_scalars();
        assert!((sc.rho1 - 2.0 * 0.75 / s).abs() < 1e-15);
        assert!((sc.rho2 - 2.0 / s).abs() < 1e-15);
        assert!((sc.eta - 1.0 / s).abs() < 1e-15);
        // rho weights plus the l weight sum to one.
        let l_weight = 1.0 - sc.rho1 - sc.rho2;
        assert!((l_weight - 2.0 * 0.25 / s).abs() < 1e-15);
        assert!((sc.alpha - 0.5 * 8.0 / (0.5 * 8.0 + 0.75)).abs() < 1e-15);
        assert!((sc.gamma - 0.5 / (0.5 * 8.0 + 0.75)).abs() < 1e-15);

        // The paper's s-normalized coefficients coincide with the standard
        // majorized step after doubling the penalty weights: both give the
        // same affine combination of (x, z, l, grad, data) terms.
        let (mu2, beta2) = (2.0 * 0.25, 2.0 * 0.75);
        let s_std = 2.0 + mu2 + beta2;
        assert!((sc.rho1 - beta2 / s_std).abs() < 1e-15);
        assert!((sc.rho2 - 2.0 / s_std).abs() < 1e-15);
        assert!((l_weight - mu2 / s_std).abs() < 1e-15);
    }
}
