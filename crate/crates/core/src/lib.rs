//! Core algorithms for low-rank regularized image compressive sensing.
//!
//! The crate is organized around a small reverse-mode differentiation engine
//! ([`tensor`]) that provides exactly the primitives the unfolded
//! reconstruction network needs. On top of it sit the learnable measurement
//! operator ([`sensing`]), the K-stage unfolded network ([`model`]), a
//! model-based iterative solver that serves as the math reference for the
//! network updates ([`solver`]), image handling and quality metrics
//! ([`image`], [`metrics`]), and the training loss/optimizer ([`train`]).
//!
//! Everything here is pure computation over in-memory buffers; file formats,
//! dataset handling, and the command line live in the companion `lrcs` crate.
//! The crate is `no_std` compatible (with `alloc`) when built without the
//! default `std` feature.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod sensing;
pub mod solver;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, TensorData};
