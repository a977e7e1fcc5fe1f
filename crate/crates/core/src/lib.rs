//! Middle-outward layer skipping for decoder-only Transformers.
//!
//! A gate probe in each first-half block emits a non-negative soft mask that
//! accumulates with depth. Once a token's accumulated mask reaches one, the
//! symmetric span of central blocks is skipped for that token and later
//! tokens stop attending to it. Gate sparsity is steered by an adaptive
//! regularizer, and FLOPs are estimated under ideal exploitation of the
//! resulting sparsity.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`kernels`], [`tape`]: dense tensors and reverse-mode autodiff.
//! - [`model`]: configuration, parameters, gates and the forward passes.
//! - [`controller`]: gate statistics, regularization losses, coefficient updates.
//! - [`flops`]: parameter and FLOPs accounting.
//! - [`data`]: byte tokenization, token files, batch sampling.
//! - [`train`]: AdamW, the learning-rate schedule, training/evaluation loops.
//! - [`config`]: the dotted key-value run configuration.

pub mod config;
pub mod controller;
pub mod data;
mod error;
pub mod flops;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
