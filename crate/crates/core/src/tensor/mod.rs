//! Minimal N-d array engine with reverse-mode differentiation.
//!
//! [`TensorData`] is plain shaped storage (parameters, images, test
//! fixtures). [`Graph`] records operations on [`Tensor`] handles as they
//! execute; [`Tensor::backward`] replays the record in reverse to populate
//! gradients. The graph is rebuilt on every forward pass.

mod gemm;
mod gradcheck;
mod graph;
mod kernels;
mod serialize;

pub use gemm::{gemm_into, Gemm, Layout};
pub use gradcheck::grad_check;
pub use graph::{concat, Graph, Tensor};
pub use serialize::{decode_tensor, encode_tensor, encoded_len};

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of all numeric kernels: IEEE 32-bit in production, 64-bit
/// when the test suite re-runs gradient checks at double precision.
pub trait Real: Float + Gemm + Debug + Display + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Number of elements implied by a shape, rejecting zero or overflowing
/// extents.
pub fn shape_numel(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "zero extent",
            });
        }
        n = n.checked_mul(e).ok_or(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflow",
        })?;
    }
    Ok(n)
}

/// Shaped, row-major value storage outside any differentiation graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = shape_numel(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: "element count does not match data length",
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape_numel(&shape)?;
        Ok(Self {
            shape,
            data: vec![T::zero(); n],
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Rank-2 constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(vec![n, n])?;
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        Ok(m)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at2_mut(&mut self, i: usize, j: usize) -> &mut T {
        debug_assert_eq!(self.rank(), 2);
        &mut self.data[i * self.shape[1] + j]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n = shape_numel(&shape)?;
        if n != self.data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: "reshape changes element count",
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(mut self, f: impl Fn(T) -> T) -> Self {
        for v in &mut self.data {
            *v = f(*v);
        }
        self
    }

    /// Converts element type; used to move f32 parameters into f64 checks.
    pub fn cast<U: Real>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numel_matches_shape_product() {
        let t = TensorData::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            TensorData::<f32>::zeros(vec![2, 0]),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(TensorData::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = TensorData::<f64>::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.clone().reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }
}
