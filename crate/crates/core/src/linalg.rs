//! Plain (graph-free) matrix helpers shared by the solver, the measurement
//! operator, and the spectrum analyzer.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm_into, Layout, Real, TensorData};

/// `a (m x k) @ b (k x n)`.
pub fn mat_mul<T: Real>(a: &TensorData<T>, b: &TensorData<T>) -> TensorData<T> {
    assert_eq!(a.cols(), b.rows(), "mat_mul inner extents");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    gemm_into(Layout::NotNot, m, k, n, a.data(), b.data(), T::zero(), T::one(), &mut out);
    TensorData::matrix(m, n, out).expect("sized")
}

/// `a (m x k) @ b^T` where `b` is stored `n x k`.
pub fn mat_mul_bt<T: Real>(a: &TensorData<T>, b: &TensorData<T>) -> TensorData<T> {
    assert_eq!(a.cols(), b.cols(), "mat_mul_bt inner extents");
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![T::zero(); m * n];
    gemm_into(Layout::NotTrans, m, k, n, a.data(), b.data(), T::zero(), T::one(), &mut out);
    TensorData::matrix(m, n, out).expect("sized")
}

/// `a^T @ b` where `a` is stored `k x m`.
pub fn mat_mul_at<T: Real>(a: &TensorData<T>, b: &TensorData<T>) -> TensorData<T> {
    assert_eq!(a.rows(), b.rows(), "mat_mul_at inner extents");
    let (m, k, n) = (a.cols(), a.rows(), b.cols());
    let mut out = vec![T::zero(); m * n];
    gemm_into(Layout::TransNot, m, k, n, a.data(), b.data(), T::zero(), T::one(), &mut out);
    TensorData::matrix(m, n, out).expect("sized")
}

pub fn transpose<T: Real>(a: &TensorData<T>) -> TensorData<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.at2(i, j);
        }
    }
    TensorData::matrix(n, m, out).expect("sized")
}

/// `a @ v` for a rank-2 `a` and a packed vector.
pub fn mat_vec<T: Real>(a: &TensorData<T>, v: &[T]) -> Vec<T> {
    assert_eq!(a.cols(), v.len(), "mat_vec extents");
    let mut out = vec![T::zero(); a.rows()];
    gemm_into(Layout::NotNot, a.rows(), a.cols(), 1, a.data(), v, T::zero(), T::one(), &mut out);
    out
}

/// `a^T @ v`.
pub fn mat_t_vec<T: Real>(a: &TensorData<T>, v: &[T]) -> Vec<T> {
    assert_eq!(a.rows(), v.len(), "mat_t_vec extents");
    let mut out = vec![T::zero(); a.cols()];
    gemm_into(Layout::TransNot, a.cols(), a.rows(), 1, a.data(), v, T::zero(), T::one(), &mut out);
    out
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub fn norm2<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn fro_norm_sq<T: Real>(a: &TensorData<T>) -> T {
    dot(a.data(), a.data())
}

/// `out = a + c * b` elementwise over equally shaped tensors.
pub fn add_scaled<T: Real>(a: &TensorData<T>, b: &TensorData<T>, c: T) -> TensorData<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + c * y)
        .collect();
    TensorData::new(a.shape().to_vec(), data).expect("sized")
}

pub fn sub<T: Real>(a: &TensorData<T>, b: &TensorData<T>) -> TensorData<T> {
    add_scaled(a, b, -T::one())
}

pub fn scale<T: Real>(a: &TensorData<T>, c: T) -> TensorData<T> {
    TensorData::new(a.shape().to_vec(), a.data().iter().map(|&x| x * c).collect()).expect("sized")
}

/// Projects `v` away from each row of `basis[..count]` and renormalizes.
/// Returns `None` when the residual collapses to numerical zero.
pub fn orthonormalize_against<T: Real>(v: &mut [T], basis: &[Vec<T>]) -> Option<()> {
    for b in basis {
        let c = dot(v, b);
        for (vi, &bi) in v.iter_mut().zip(b) {
            *vi = *vi - c * bi;
        }
    }
    let n = norm2(v);
    if n.as_f64() < 1e-300 {
        return None;
    }
    for vi in v.iter_mut() {
        *vi = *vi / n;
    }
    Some(())
}
