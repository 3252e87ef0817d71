//! The measurement operator: block-wise sampling `y = Phi x`, initial
//! reconstruction `x0 = Phi^T y`, and the orthogonality penalty on `Phi`.
//!
//! Images are processed as non-overlapping 33x33 blocks, each flattened
//! row-major to a length-1089 vector. Sampling and initial reconstruction
//! share the same underlying matrix.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{Graph, Real, Tensor, TensorData};

/// Side length of a sampling block.
pub const BLOCK: usize = 33;
/// Signal dimension per block (`33 * 33`).
pub const BLOCK_LEN: usize = BLOCK * BLOCK;

/// Measurement count for a CS ratio: `floor(ratio * 1089)`, at least 1.
pub fn ratio_to_m(ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::RatioOutOfRange(ratio));
    }
    Ok(((ratio * BLOCK_LEN as f64).floor() as usize).max(1))
}

/// The learnable matrix `Phi (m x 1089)` with its CS-ratio bookkeeping.
/// Sampling and initial reconstruction share these values.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementOperator<T> {
    phi: TensorData<T>,
    m: usize,
    ratio: f64,
}

impl<T: Real> MeasurementOperator<T> {
    /// Rows drawn i.i.d. Gaussian, then row-orthonormalized, so the
    /// orthogonality penalty starts near zero. Deterministic per seed.
    pub fn init(ratio: f64, seed: u64) -> Result<Self> {
        let m = ratio_to_m(ratio)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..BLOCK_LEN).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        // Modified Gram-Schmidt with one reorthogonalization pass.
        for i in 0..m {
            for _ in 0..2 {
                let (done, rest) = rows.split_at_mut(i);
                linalg::orthonormalize_against(&mut rest[0], done)
                    .expect("gaussian rows are full rank");
            }
        }
        let data = rows
            .into_iter()
            .flatten()
            .map(T::from_f64)
            .collect::<Vec<T>>();
        Ok(Self {
            phi: TensorData::matrix(m, BLOCK_LEN, data)?,
            m,
            ratio,
        })
    }

    /// Wraps existing matrix values (e.g. loaded from a checkpoint).
    pub fn from_phi(phi: TensorData<T>, ratio: f64) -> Result<Self> {
        let m = ratio_to_m(ratio)?;
        if phi.shape() != [m, BLOCK_LEN] {
            return Err(Error::ShapeMismatch {
                op: "measurement operator",
                lhs: phi.shape().to_vec(),
                rhs: alloc::vec![m, BLOCK_LEN],
            });
        }
        Ok(Self { phi, m, ratio })
    }

    pub fn phi(&self) -> &TensorData<T> {
        &self.phi
    }

    pub fn phi_mut(&mut self) -> &mut TensorData<T> {
        &mut self.phi
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        BLOCK_LEN
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Inserts `Phi` into a graph; trainable when `requires_grad` is set.
    pub fn phi_leaf(&self, graph: &Graph<T>, requires_grad: bool) -> Tensor<T> {
        graph.leaf(self.phi.clone(), requires_grad)
    }

    pub fn cast<U: Real>(&self) -> MeasurementOperator<U> {
        MeasurementOperator {
            phi: self.phi.cast(),
            m: self.m,
            ratio: self.ratio,
        }
    }
}

/// Per-block measurements: column `b` of `y (m x blocks)` is `Phi` applied
/// to block `b` (row-major block order over the grid).
pub struct Measurements<T: Real> {
    pub y: Tensor<T>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl<T: Real> Measurements<T> {
    pub fn blocks(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

fn block_grid(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected a (1, h, w) image tensor",
        });
    }
    let (h, w) = (shape[1], shape[2]);
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::NotBlockAligned { h, w, block: BLOCK });
    }
    Ok((h / BLOCK, w / BLOCK))
}

/// Samples an image: stride-33 cross-correlation with the rows of `Phi` as
/// kernels, equivalent to flattening each block and applying `Phi`.
pub fn sample<T: Real>(phi: &Tensor<T>, image: &Tensor<T>) -> Result<Measurements<T>> {
    let (grid_rows, grid_cols) = block_grid(&image.shape())?;
    let m = phi.shape()[0];
    let kernel = phi.reshape(alloc::vec![m, 1, BLOCK, BLOCK])?;
    let y = image
        .conv2d(&kernel, BLOCK, 0)?
        .reshape(alloc::vec![m, grid_rows * grid_cols])?;
    Ok(Measurements {
        y,
        grid_rows,
        grid_cols,
    })
}

/// The explicit flatten-and-multiply route. Numerically equivalent to
/// [`sample`]; kept as the independent path for the equivalence checks.
pub fn sample_matmul<T: Real>(phi: &Tensor<T>, image: &Tensor<T>) -> Result<Measurements<T>> {
    let (grid_rows, grid_cols) = block_grid(&image.shape())?;
    let blocks = image
        .pixel_unshuffle(BLOCK)?
        .reshape(alloc::vec![BLOCK_LEN, grid_rows * grid_cols])?;
    let y = phi.matmul(&blocks)?;
    Ok(Measurements {
        y,
        grid_rows,
        grid_cols,
    })
}

/// Initial reconstruction `x0 = Phi^T y`, rearranged back to image layout
/// block by block.
pub fn init_reconstruction<T: Real>(phi: &Tensor<T>, meas: &Measurements<T>) -> Result<Tensor<T>> {
    let ys = meas.y.shape();
    let m = phi.shape()[0];
    if ys.len() != 2 || ys[0] != m || ys[1] != meas.blocks() {
        return Err(Error::ShapeMismatch {
            op: "init_reconstruction",
            lhs: phi.shape(),
            rhs: ys,
        });
    }
    phi.transpose()?
        .matmul(&meas.y)?
        .reshape(alloc::vec![BLOCK_LEN, meas.grid_rows, meas.grid_cols])?
        .pixel_shuffle(BLOCK)
}

/// Orthogonality penalty `(1/m^2) * ||Phi Phi^T - E||_F^2`.
pub fn orth_loss<T: Real>(phi: &Tensor<T>) -> Result<Tensor<T>> {
    let m = phi.shape()[0];
    let gram = phi.matmul(&phi.transpose()?)?;
    let eye = phi.graph().identity(m)?;
    let scale = T::from_f64(1.0 / (m * m) as f64);
    Ok(gram.sub(&eye)?.sum_sq()?.scale(scale))
}

/// `||Phi Phi^T - E||_F` evaluated outside any graph.
pub fn orthonormality_defect<T: Real>(phi: &TensorData<T>) -> f64 {
    let gram = linalg::mat_mul_bt(phi, phi);
    let m = phi.rows();
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            let e = if i == j { 1.0 } else { 0.0 };
            let d = gram.at2(i, j).as_f64() - e;
            acc += d * d;
        }
    }
    acc.sqrt()
}
