//! Layers built on the tape: dense, layer-norm and batch-norm.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Mode, Tape, Var};
use crate::error::Result;
use crate::params::{self, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(±1/sqrt(fan_in))` for weight and bias.
    FanIn,
    /// Xavier-uniform weight, zero bias.
    Xavier,
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let (w, b) = match init {
            Init::FanIn => (
                params::fan_in_uniform(rng, &[in_dim, out_dim], in_dim),
                params::fan_in_uniform(rng, &[out_dim], in_dim),
            ),
            Init::Xavier => (params::xavier_uniform(rng, in_dim, out_dim), Tensor::zeros(&[out_dim])),
        };
        Linear {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, self.eps)?;
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Exponential update `r <- (1 - momentum) r + momentum * batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Batch normalization over rows (every leading axis is a sample axis).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub running: RunningStats,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
            running: RunningStats::new(dim),
        }
    }

    /// Train mode normalizes with batch statistics over rows where
    /// `row_mask` is set and returns them; eval mode is the fixed affine map
    /// given by the running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        row_mask: Option<&[bool]>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (normed, stats) = match tape.mode() {
            Mode::Train => {
                let (v, s) = tape.batch_norm_train(x, row_mask, self.eps)?;
                (v, Some(s))
            }
            Mode::Eval => {
                let shift: Vec<f64> = self.running.mean.iter().map(|m| -m).collect();
                let inv: Vec<f64> = self
                    .running
                    .var
                    .iter()
                    .map(|v| 1.0 / libm::sqrt(v + self.eps))
                    .collect();
                let shift = tape.input(Tensor::vector(shift)?);
                let inv = tape.input(Tensor::vector(inv)?);
                let centered = tape.add(x, shift)?;
                (tape.mul(centered, inv)?, None)
            }
        };
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.mul(normed, g)?;
        Ok((tape.add(y, b)?, stats))
    }
}
