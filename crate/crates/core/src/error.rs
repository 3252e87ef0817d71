//! Error type shared by all core modules.

use alloc::string::String;
use alloc::vec::Vec;

/// Alias used throughout the crate.
pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("tensors belong to different graphs")]
    GraphMismatch,

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("conv2d: kernel {kernel}x{kernel} larger than padded input {padded_h}x{padded_w}")]
    KernelTooLarge {
        kernel: usize,
        padded_h: usize,
        padded_w: usize,
    },

    #[error("pixel_shuffle: {channels} channels not divisible by {s}^2")]
    ChannelsNotDivisible { channels: usize, s: usize },

    #[error("adaptive_avg_pool: target {out_h}x{out_w} exceeds input {in_h}x{in_w}")]
    PoolTargetTooLarge {
        out_h: usize,
        out_w: usize,
        in_h: usize,
        in_w: usize,
    },

    #[error("CS ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),

    #[error("image extents {h}x{w} are not multiples of the {block} block size")]
    NotBlockAligned { h: usize, w: usize, block: usize },

    #[error("rank {rank} exceeds min dimension {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("power iteration failed to converge for singular triplet {index}")]
    SvdNoConvergence { index: usize },

    #[error("solver diverged at iteration {iteration}: cost rose for 3 consecutive steps")]
    Divergence {
        iteration: usize,
        trace: Vec<f64>,
    },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(&'static str),

    #[error("stage count mismatch: parameters have {params}, config requests {config}")]
    StageCountMismatch { params: usize, config: usize },

    #[error("malformed tensor blob: {0}")]
    MalformedTensor(&'static str),

    #[error("malformed PGM: {0}")]
    MalformedPgm(&'static str),

    #[error("patch size {size} exceeds image extents {h}x{w}")]
    PatchTooLarge { size: usize, h: usize, w: usize },

    #[error("image {h}x{w} smaller than the {window}x{window} SSIM window")]
    ImageTooSmall { h: usize, w: usize, window: usize },
}
