//! Feature boosting, suppression and diversification for part-based image
//! classification, built on a small reverse-mode tensor engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`kernels`], [`tape`]: dense tensors and differentiable ops.
//! - [`gradcheck`]: finite-difference verification.
//! - [`nn`]: parameter storage, layers, loss.
//! - [`fbsm`]: stripe grading, boosting and suppression.
//! - [`fdm`]: negative-similarity cross attention between part features.
//! - [`model`]: staged backbone with three part heads.
//! - [`data`], [`train`], [`ablation`]: synthetic data and the training recipe.
//! - [`persist`], [`viz`]: checkpoints and activation-map export.

pub mod ablation;
pub mod data;
pub mod error;
pub mod fbsm;
pub mod fdm;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod persist;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
