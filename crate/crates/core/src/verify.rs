//! Double-precision finite-difference verification of every differentiable
//! primitive and of the end-to-end unfolded loss. Backs the `gradcheck`
//! command and the acceptance gradient suite.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::sensing;
use crate::tensor::{concat, grad_check, Graph, Tensor, TensorData};
use crate::train::total_loss;

/// Relative-error tolerance every check must satisfy.
pub const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// One named check with its worst observed relative error.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> TensorData<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    TensorData::new(shape, data).unwrap()
}

/// Random values bounded away from zero, for kinked ops like relu.
fn random_tensor_off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> TensorData<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v.signum() * (v.abs() + 0.1)
        })
        .collect();
    TensorData::new(shape, data).unwrap()
}

/// Weighted reduction making per-coordinate gradients distinct, so a
/// misrouted gradient cannot hide inside a uniform sum.
fn weighted_sum(out: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let w = random_tensor(rng, out.shape());
    Ok(out.mul(&out.graph().constant(w))?.sum())
}

fn run_check<F>(
    reports: &mut Vec<CheckReport>,
    name: &str,
    runs: usize,
    seed: u64,
    mut one_run: F,
) -> Result<()>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for r in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((r as u64) << 32) ^ 0x9e37);
        worst = worst.max(one_run(&mut rng)?);
    }
    reports.push(CheckReport {
        name: String::from(name),
        max_rel_err: worst,
        tolerance: GRAD_TOL,
    });
    Ok(())
}

/// Finite-difference checks for every primitive, `runs` random shapes each.
pub fn primitive_suite(runs: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();

    run_check(&mut reports, "add", runs, seed, |rng| {
        let shape = vec![rng.random_range(1..5usize), rng.random_range(1..6usize)];
        let a = random_tensor(rng, shape.clone());
        let b = random_tensor(rng, shape);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].add(&l[1])?, &mut wrng.clone()),
            &[a, b],
            EPS,
        )
    })?;

    run_check(&mut reports, "sub", runs, seed + 1, |rng| {
        let shape = vec![rng.random_range(1..5usize), rng.random_range(1..6usize)];
        let a = random_tensor(rng, shape.clone());
        let b = random_tensor(rng, shape);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].sub(&l[1])?, &mut wrng.clone()),
            &[a, b],
            EPS,
        )
    })?;

    run_check(&mut reports, "mul", runs, seed + 2, |rng| {
        let shape = vec![rng.random_range(1..5usize), rng.random_range(1..6usize)];
        let a = random_tensor(rng, shape.clone());
        let b = random_tensor(rng, shape);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].mul(&l[1])?, &mut wrng.clone()),
            &[a, b],
            EPS,
        )
    })?;

    run_check(&mut reports, "scale", runs, seed + 3, |rng| {
        let shape = vec![rng.random_range(1..20usize)];
        let a = random_tensor(rng, shape);
        let c: f64 = StandardNormal.sample(rng);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].scale(c), &mut wrng.clone()),
            &[a],
            EPS,
        )
    })?;

    run_check(&mut reports, "mul_scalar", runs, seed + 4, |rng| {
        let shape = vec![rng.random_range(1..6usize), rng.random_range(1..6usize)];
        let a = random_tensor(rng, shape);
        let s = random_tensor(rng, vec![1]);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].mul_scalar(&l[1])?, &mut wrng.clone()),
            &[a, s],
            EPS,
        )
    })?;

    run_check(&mut reports, "bias_add", runs, seed + 5, |rng| {
        let c = rng.random_range(1..4usize);
        let shape = vec![c, rng.random_range(1..5usize), rng.random_range(1..5usize)];
        let x = random_tensor(rng, shape);
        let b = random_tensor(rng, vec![c]);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].bias_add(&l[1])?, &mut wrng.clone()),
            &[x, b],
            EPS,
        )
    })?;

    run_check(&mut reports, "matmul", runs, seed + 6, |rng| {
        let (m, k, n) = (
            rng.random_range(1..5usize),
            rng.random_range(1..6usize),
            rng.random_range(1..5usize),
        );
        let a = random_tensor(rng, vec![m, k]);
        let b = random_tensor(rng, vec![k, n]);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].matmul(&l[1])?, &mut wrng.clone()),
            &[a, b],
            EPS,
        )
    })?;

    run_check(&mut reports, "transpose", runs, seed + 7, |rng| {
        let shape = vec![rng.random_range(1..6usize), rng.random_range(1..6usize)];
        let a = random_tensor(rng, shape);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].transpose()?, &mut wrng.clone()),
            &[a],
            EPS,
        )
    })?;

    run_check(&mut reports, "conv2d", runs, seed + 8, |rng| {
        let c_in = rng.random_range(1..3usize);
        let c_out = rng.random_range(1..3usize);
        let k = [1usize, 3][rng.random_range(0..2usize)];
        let stride = rng.random_range(1..3usize);
        let padding = rng.random_range(0..2usize);
        let h = rng.random_range(k + 1..9usize.max(k + 2));
        let w = rng.random_range(k + 1..9usize.max(k + 2));
        let x = random_tensor(rng, vec![c_in, h, w]);
        let kern = random_tensor(rng, vec![c_out, c_in, k, k]);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].conv2d(&l[1], stride, padding)?, &mut wrng.clone()),
            &[x, kern],
            EPS,
        )
    })?;

    run_check(&mut reports, "relu", runs, seed + 9, |rng| {
        let shape = vec![rng.random_range(1..7usize), rng.random_range(1..7usize)];
        let a = random_tensor_off_zero(rng, shape);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].relu(), &mut wrng.clone()),
            &[a],
            EPS,
        )
    })?;

    run_check(&mut reports, "concat", runs, seed + 10, |rng| {
        let axis = rng.random_range(0..2usize);
        let (h, w) = (rng.random_range(1..5usize), rng.random_range(1..5usize));
        let mut sa = vec![h, w];
        let mut sb = vec![h, w];
        sa[axis] = rng.random_range(1..4usize);
        sb[axis] = rng.random_range(1..4usize);
        let a = random_tensor(rng, sa);
        let b = random_tensor(rng, sb);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&concat(&[l[0].clone(), l[1].clone()], axis)?, &mut wrng.clone()),
            &[a, b],
            EPS,
        )
    })?;

    run_check(&mut reports, "adaptive_avg_pool", runs, seed + 11, |rng| {
        let c = rng.random_range(1..3usize);
        let h = rng.random_range(2..8usize);
        let w = rng.random_range(2..8usize);
        let oh = rng.random_range(1..=h);
        let ow = rng.random_range(1..=w);
        let x = random_tensor(rng, vec![c, h, w]);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].adaptive_avg_pool(oh, ow)?, &mut wrng.clone()),
            &[x],
            EPS,
        )
    })?;

    run_check(&mut reports, "pixel_shuffle", runs, seed + 12, |rng| {
        let s = rng.random_range(1..4usize);
        let c = rng.random_range(1..3usize) * s * s;
        let shape = vec![c, rng.random_range(1..4usize), rng.random_range(1..4usize)];
        let x = random_tensor(rng, shape);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].pixel_shuffle(s)?, &mut wrng.clone()),
            &[x],
            EPS,
        )
    })?;

    run_check(&mut reports, "pixel_unshuffle", runs, seed + 13, |rng| {
        let s = rng.random_range(1..4usize);
        let shape = vec![
            rng.random_range(1..3usize),
            s * rng.random_range(1..4usize),
            s * rng.random_range(1..4usize),
        ];
        let x = random_tensor(rng, shape);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].pixel_unshuffle(s)?, &mut wrng.clone()),
            &[x],
            EPS,
        )
    })?;

    run_check(&mut reports, "reshape", runs, seed + 14, |rng| {
        let (h, w) = (rng.random_range(1..6usize), rng.random_range(1..6usize));
        let x = random_tensor(rng, vec![h, w]);
        let wrng = rng.clone();
        grad_check(
            move |_, l| weighted_sum(&l[0].reshape(vec![l[0].numel()])?, &mut wrng.clone()),
            &[x],
            EPS,
        )
    })?;

    run_check(&mut reports, "sum", runs, seed + 15, |rng| {
        let shape = vec![rng.random_range(1..20usize)];
        let x = random_tensor(rng, shape);
        grad_check(|_, l| Ok(l[0].sum()), &[x], EPS)
    })?;

    Ok(reports)
}

/// Flat parameter count and a way to nudge one coordinate, both in the
/// canonical visit order.
fn flat_len(params: &ModelParams<f64>) -> usize {
    let mut n = 0;
    params.visit(|_, _, d| n += d.len());
    n
}

fn nudge(params: &mut ModelParams<f64>, flat_index: usize, delta: f64) {
    let mut offset = 0usize;
    params.visit_mut(|_, values| {
        if flat_index >= offset && flat_index < offset + values.len() {
            values[flat_index - offset] += delta;
        }
        offset += values.len();
    });
}

fn class_of(name: &str) -> &'static str {
    if name == "phi" {
        "phi"
    } else if name.contains(".lrgm.") {
        "lrgm"
    } else if name.contains(".gdpm.") {
        "gdpm"
    } else {
        "scalars"
    }
}

/// End-to-end loss for the finite-difference comparison: sample a fixed
/// image, reconstruct, and take the combined training loss.
fn e2e_loss(params: &ModelParams<f64>, image: &TensorData<f64>, tau: f64) -> Result<f64> {
    let graph = Graph::new();
    let bound = params.bind(&graph, true);
    let img = graph.constant(image.clone());
    let meas = sensing::sample(&bound.phi, &img)?;
    let trace = bound.forward(&meas)?;
    let loss = total_loss(
        core::slice::from_ref(trace.final_x()),
        &[img],
        &bound.phi,
        tau,
    )?;
    Ok(loss.item())
}

/// Finite-difference spot check of the full unfolded loss gradient.
///
/// Picks `coords_per_class` random coordinates from each parameter class
/// (measurement matrix, stage scalars, LRGM weights, GDPM weights) and
/// compares the recorded gradient against central differences.
pub fn end_to_end_check(stages: usize, coords_per_class: usize, seed: u64) -> Result<CheckReport> {
    let config = ModelConfig {
        stages,
        rank: 3,
        channels: 8,
        ratio: 0.25,
    };
    let params: ModelParams<f64> = init_params(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let image = {
        let data = (0..1089).map(|_| rng.random::<f64>()).collect();
        TensorData::new(vec![1, 33, 33], data).unwrap()
    };
    let tau = 0.01;

    // Analytic gradient, flattened in canonical order.
    let graph = Graph::new();
    let bound = params.bind(&graph, true);
    let img = graph.constant(image.clone());
    let meas = sensing::sample(&bound.phi, &img)?;
    let trace = bound.forward(&meas)?;
    let loss = total_loss(
        core::slice::from_ref(trace.final_x()),
        &[img],
        &bound.phi,
        tau,
    )?;
    loss.backward()?;
    let mut analytic = Vec::with_capacity(flat_len(&params));
    let mut class_ranges: Vec<(&'static str, usize, usize)> = Vec::new();
    for (name, leaf) in bound.named_leaves() {
        let g = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let start = analytic.len();
        analytic.extend_from_slice(&g);
        class_ranges.push((class_of(name), start, analytic.len()));
    }

    // Sample coordinates per class.
    let mut worst = 0.0f64;
    for class in ["phi", "scalars", "lrgm", "gdpm"] {
        let coords: Vec<usize> = {
            let ranges: Vec<(usize, usize)> = class_ranges
                .iter()
                .filter(|(c, _, _)| *c == class)
                .map(|&(_, a, b)| (a, b))
                .collect();
            let total: usize = ranges.iter().map(|(a, b)| b - a).sum();
            (0..coords_per_class)
                .map(|_| {
                    let mut pick = rng.random_range(0..total);
                    for &(a, b) in &ranges {
                        if pick < b - a {
                            return a + pick;
                        }
                        pick -= b - a;
                    }
                    unreachable!()
                })
                .collect()
        };
        for idx in coords {
            let mut plus = params.clone();
            nudge(&mut plus, idx, EPS);
            let mut minus = params.clone();
            nudge(&mut minus, idx, -EPS);
            let numeric = (e2e_loss(&plus, &image, tau)? - e2e_loss(&minus, &image, tau)?)
                / (2.0 * EPS);
            let a = analytic[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(CheckReport {
        name: format!("end_to_end_k{stages}"),
        max_rel_err: worst,
        tolerance: GRAD_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_suite_passes_at_small_run_count() {
        let reports = primitive_suite(3, 17).unwrap();
        assert_eq!(reports.len(), 16);
        for r in &reports {
            assert!(r.passed(), "{} failed with {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn single_stage_end_to_end_gradient() {
        let report = end_to_end_check(1, 2, 5).unwrap();
        assert!(report.passed(), "error {}", report.max_rel_err);
    }
}
