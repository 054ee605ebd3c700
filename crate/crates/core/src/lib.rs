//! Multi-scale attention saliency network on a small reverse-mode autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`kernels`], [`autograd`], [`gradcheck`]: dense rank-4
//!   tensors, convolution/pooling/resampling kernels and an eager tape.
//! * [`blocks`]: channel attention, the multi-scale attention guided module
//!   and the attention-based multi-level integrator.
//! * [`model`]: backbone taps, feature extraction and integration networks,
//!   plus the structural ablation variants.
//! * [`loss`]: the sharpening loss (soft F-measure plus MAE) and cross-entropy.
//! * [`metrics`]: PR/F curves, adaptive-threshold F, max F, weighted F, MAE.
//! * [`train`]: SGD with momentum, plateau schedule, augmentation, synthetic
//!   data and the ablation / λ-sweep drivers.
//! * [`checkpoint`], [`config`], [`imageio`]: on-disk formats.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Float, Shape, Tensor};
