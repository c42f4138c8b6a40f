//! Model-guided deep unfolding for multi-contrast image super-resolution.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`ops`] and [`autodiff`]: dense `f32` tensors, the layer
//!   kernels and a tape-based reverse-mode differentiator over them.
//! * [`degradation`]: blur/decimation and cross-modal observation operators
//!   with exact adjoints, bicubic resampling and a paired-contrast phantom.
//! * [`solver`]: the half-quadratic-splitting / proximal-gradient iteration
//!   for the variational objective, with a conjugate-gradient oracle.
//! * [`net`]: the unfolded network (shared U-Net denoiser, invertible
//!   cross-modal transform, learned up/down blocks, per-stage scalars).
//! * [`train`] and [`checkpoint`]: L1 training with Adam and bit-exact
//!   checkpoints; [`dataset`]: hashed synthetic datasets on disk.
//! * [`metrics`]: PSNR, SSIM and RMSE in 0–255 units.
//! * [`oracle`] and [`selftest`]: independent `f64` reference kernels and the
//!   invariant suite run by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod degradation;
pub mod error;
pub mod io;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod oracle;
pub mod parallel;
pub mod selftest;
pub mod solver;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
