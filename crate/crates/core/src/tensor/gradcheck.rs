//! Central-difference verification of recorded gradients.

use alloc::vec::Vec;

use super::{Graph, Real, Tensor, TensorData};
use crate::error::Result;

/// Builds the closure's graph twice per coordinate and compares analytic
/// gradients against central finite differences.
///
/// Returns the maximum over all input coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<T, F>(f: F, inputs: &[TensorData<T>], eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&Graph<T>, &[Tensor<T>]) -> Result<Tensor<T>>,
{
    assert!(eps > T::zero(), "grad_check eps must be positive");

    // Analytic pass.
    let graph = Graph::new();
    let leaves: Vec<Tensor<T>> = inputs
        .iter()
        .map(|d| graph.leaf(d.clone(), true))
        .collect();
    let loss = f(&graph, &leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<T>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| alloc::vec![T::zero(); l.numel()]))
        .collect();

    let eval = |perturbed: &[TensorData<T>]| -> Result<T> {
        let g = Graph::new();
        let ls: Vec<Tensor<T>> = perturbed.iter().map(|d| g.leaf(d.clone(), true)).collect();
        Ok(f(&g, &ls)?.item())
    };

    let floor = T::from_f64(1e-12);
    let mut worst = T::zero();
    let mut work: Vec<TensorData<T>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (eps + eps);
            let a = analytic[ti][ci];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let err = (a - numeric).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_closure_has_vanishing_error() {
        // sum(2x) has constant gradient 2; central differences are exact for
        // linear maps up to floating-point noise.
        let x = TensorData::new(vec![3], vec![0.5f64, -1.5, 2.0]).unwrap();
        let err = grad_check(
            |_, leaves| Ok(leaves[0].scale(2.0).sum()),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "linear closure error {err}");
    }

    #[test]
    fn quadratic_closure_matches_hand_gradient() {
        // f(x) = sum(x^2) at [1, 2]: analytic gradient [2, 4].
        let x = TensorData::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let graph = Graph::new();
        let leaf = graph.leaf(x.clone(), true);
        leaf.sum_sq().unwrap().backward().unwrap();
        assert_eq!(leaf.grad().unwrap(), vec![2.0, 4.0]);

        let err = grad_check(|_, l| l[0].sum_sq(), &[x], 1e-5).unwrap();
        assert!(err < 1e-7, "quadratic closure error {err}");
    }
}
