//! End-to-end training loss and the Adam optimizer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::sensing;
use crate::tensor::{Real, Tensor};

/// `(1/(N*n_b)) * sum_i ||xk_i - gt_i||_F^2 + tau * orth_loss(phi)` where
/// `N` is pixels per sample and `n_b` the batch size.
pub fn total_loss<T: Real>(
    x_k_batch: &[Tensor<T>],
    gt_batch: &[Tensor<T>],
    phi: &Tensor<T>,
    tau: f64,
) -> Result<Tensor<T>> {
    if x_k_batch.is_empty() || x_k_batch.len() != gt_batch.len() {
        return Err(Error::ShapeMismatch {
            op: "total_loss batch",
            lhs: vec![x_k_batch.len()],
            rhs: vec![gt_batch.len()],
        });
    }
    let pixels = gt_batch[0].numel();
    let mut fidelity: Option<Tensor<T>> = None;
    for (x, gt) in x_k_batch.iter().zip(gt_batch) {
        let term = x.sub(gt)?.sum_sq()?;
        fidelity = Some(match fidelity {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let fidelity = fidelity
        .expect("non-empty batch")
        .scale(T::from_f64(1.0 / (pixels * x_k_batch.len()) as f64));
    let orth = sensing::orth_loss(phi)?.scale(T::from_f64(tau));
    fidelity.add(&orth)
}

/// Adam with bias correction. One instance owns the moment state for a fixed
/// parameter list (identified by slot order).
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First/second moment for a slot (mostly for tests).
    pub fn moments(&self, slot: usize) -> Option<(&[T], &[T])> {
        Some((self.m.get(slot)?.as_slice(), self.v.get(slot)?.as_slice()))
    }

    fn apply(&mut self, slot: usize, values: &mut [T], grad: &[T]) {
        if self.m.len() <= slot {
            self.m.resize(slot + 1, Vec::new());
            self.v.resize(slot + 1, Vec::new());
        }
        if self.m[slot].is_empty() {
            self.m[slot] = vec![T::zero(); values.len()];
            self.v[slot] = vec![T::zero(); values.len()];
        }
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for i in 0..values.len() {
            let g = grad[i];
            let m = self.beta1 * self.m[slot][i] + (one - self.beta1) * g;
            let v = self.beta2 * self.v[slot][i] + (one - self.beta2) * g * g;
            self.m[slot][i] = m;
            self.v[slot][i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            values[i] = values[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Updates a standalone parameter (slot 0). Used when optimizing a
    /// single tensor such as the measurement matrix alone.
    pub fn step_single(&mut self, name: &str, values: &mut [T], grad: &[T]) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: String::from(name),
            });
        }
        self.step += 1;
        self.apply(0, values, grad);
        Ok(())
    }

    /// Applies one update across all model parameters. `grads` must be in
    /// the canonical visit order (as read back from the bound leaves).
    pub fn step_params(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &[(String, Vec<T>)],
    ) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        self.step += 1;
        let mut slot = 0usize;
        let mut order_error: Option<Error> = None;
        params.visit_mut(|name, values| {
            if order_error.is_some() {
                return;
            }
            match grads.get(slot) {
                Some((gname, g)) if gname == name && g.len() == values.len() => {
                    self.apply(slot, values, g);
                }
                _ => {
                    order_error = Some(Error::ShapeMismatch {
                        op: "adam gradient order",
                        lhs: vec![slot],
                        rhs: vec![grads.len()],
                    });
                }
            }
            slot += 1;
        });
        if let Some(e) = order_error {
            return Err(e);
        }
        if slot != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "adam gradient count",
                lhs: vec![slot],
                rhs: vec![grads.len()],
            });
        }
        Ok(())
    }
}

/// Reads gradients off bound leaves in their registration (canonical) order,
/// substituting zeros for parameters the loss did not reach.
pub fn collect_gradients<T: Real>(named_leaves: &[(String, Tensor<T>)]) -> Vec<(String, Vec<T>)> {
    named_leaves
        .iter()
        .map(|(name, leaf)| {
            let g = leaf.grad().unwrap_or_else(|| vec![T::zero(); leaf.numel()]);
            (name.clone(), g)
        })
        .collect()
}
