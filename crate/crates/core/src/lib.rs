//! Fully invertible U-Nets with learnable orthogonal up- and downsampling.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core can be embedded
//! anywhere; the `std` feature only adds wall-clock timing and
//! `std::error::Error` impls. File formats, the CLI and experiment drivers
//! live in the companion `iunet` crate.
//!
//! Module map:
//!
//! * [`linalg`]: small dense matrices, skew-symmetrization, the truncated
//!   series matrix exponential and its Fréchet derivative, row-to-filter
//!   reordering.
//! * [`tensor`]: channel-first tensors and the stride-equals-kernel
//!   convolution, its transpose, the kernel-side adjoint, and the padded
//!   3^d convolution used inside coupling subnets.
//! * [`resample`]: learnable orthogonal down/upsampling with parameter and
//!   input gradients.
//! * [`layers`]: coupling layers, normalization, channel split/concat.
//! * [`iunet`]: network assembly, forward/inverse, and the two
//!   backpropagation engines with activation-memory accounting.
//! * [`flow`]: normalizing-flow likelihood, sampling and training.
//! * [`data`]: foam phantoms, degradation, PSNR, Gaussian mixtures.
//! * [`rng`]: the SplitMix64 generator behind every random draw.
//! * [`optim`]: the Adam optimizer.
#![cfg_attr(not(feature = "std"), no_std)]
// NaN-rejecting checks are written as `!(x >= 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod flow;
pub mod iunet;
pub mod layers;
pub mod linalg;
mod math;
pub mod optim;
pub mod resample;
pub mod rng;
pub mod tensor;
mod time;

pub use error::{Error, Result};
pub use iunet::{GradReport, IUNet, IUNetConfig};
pub use linalg::{Kernel, Matrix};
pub use resample::ResampleOp;
pub use tensor::{StrideSpec, Tensor};
