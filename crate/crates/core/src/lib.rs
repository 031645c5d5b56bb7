//! Adaptive multimodal fusion for persuasiveness prediction.
//!
//! A small reverse-mode autodiff engine plus the model, losses, training
//! loop and evaluation built on top of it. `no_std` with `alloc`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod alignment;
pub mod autodiff;
pub mod batch;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod folds;
pub mod fusion;
pub mod gradcheck;
pub mod heterogeneity;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod search;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
