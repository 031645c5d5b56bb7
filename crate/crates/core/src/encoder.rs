//! Per-modality sequence encoder: FC+ReLU+batch-norm input embedding, one
//! multi-head self-attention encoder layer, and masked max pooling.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Init, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Width of input embeddings, attention model dim and latent embeddings.
pub const D_MODEL: usize = 16;
pub const N_HEADS: usize = 4;

/// Sinusoidal positional encoding `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, dim]);
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / libm::pow(10_000.0, 2.0 * pair / dim as f64);
            pe.data_mut()[t * dim + i] = if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
        }
    }
    pe
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim % heads == 0, "head count must divide model dim");
        let mut proj = |p: &str| Linear::new(store, &format!("{name}.{p}"), dim, dim, Init::Xavier, rng);
        SelfAttention {
            query: proj("q"),
            key: proj("k"),
            value: proj("v"),
            output: proj("o"),
            heads,
        }
    }

    fn split_heads(&self, tape: &mut Tape<'_>, x: Var, b: usize, t: usize) -> Result<Var> {
        let dh = D_MODEL / self.heads;
        let x = tape.reshape(x, &[b, t, self.heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * self.heads, t, dh])
    }

    /// Returns the attended output `[B, T, D]` and attention weights
    /// `[B*H, T, T]` (query rows, key columns).
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let dh = D_MODEL / self.heads;
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let q = self.split_heads(tape, q, b, t)?;
        let k = self.split_heads(tape, k, b, t)?;
        let v = self.split_heads(tape, v, b, t)?;

        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(dh as f64))?;
        let mut key_mask = Vec::with_capacity(b * self.heads * t * t);
        for bi in 0..b {
            let row = &mask[bi * t..(bi + 1) * t];
            for _ in 0..self.heads * t {
                key_mask.extend_from_slice(row);
            }
        }
        let attn = tape.softmax_rows(scores, Some(&key_mask))?;

        let ctx = tape.bmm(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[b, self.heads, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, D_MODEL])?;
        Ok((self.output.forward(tape, ctx)?, attn))
    }
}

#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub input_dim: usize,
    pub embed: Linear,
    pub embed_norm: BatchNorm,
    pub attention: SelfAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub positional_encoding: bool,
    pub dropout: f64,
}

/// Tape handles produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B, D]`
    pub latent: Var,
    /// `[B, T, D]`
    pub hidden: Var,
    /// `[B*H, T, T]`
    pub attention: Var,
    pub bn_stats: Option<BatchStats>,
}

impl ModalityEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        modality: Modality,
        input_dim: usize,
        positional_encoding: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let p = |s: &str| format!("encoder.{}.{s}", modality.short());
        ModalityEncoder {
            modality,
            input_dim,
            embed: Linear::new(store, &p("embed"), input_dim, D_MODEL, Init::FanIn, rng),
            embed_norm: BatchNorm::new(store, &p("embed_bn"), D_MODEL),
            attention: SelfAttention::new(store, &p("attn"), D_MODEL, N_HEADS, rng),
            norm1: LayerNorm::new(store, &p("ln1"), D_MODEL),
            ff1: Linear::new(store, &p("ff1"), D_MODEL, D_MODEL, Init::FanIn, rng),
            ff2: Linear::new(store, &p("ff2"), D_MODEL, D_MODEL, Init::FanIn, rng),
            norm2: LayerNorm::new(store, &p("ln2"), D_MODEL),
            positional_encoding,
            dropout,
        }
    }

    /// Maps each timestep of `[B, T, d_m]` to `[B, T, 16]`:
    /// FC, ReLU, batch-norm over valid steps, dropout.
    pub fn embed_inputs(&self, tape: &mut Tape<'_>, x: Var, mask: &[bool]) -> Result<(Var, Option<BatchStats>)> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.input_dim {
            return Err(Error::shape(
                "embed_inputs",
                format!("{} features {s:?}, expected [B, T, {}]", self.modality.name(), self.input_dim),
            ));
        }
        let h = self.embed.forward(tape, x)?;
        let h = tape.relu(h)?;
        let (h, stats) = self.embed_norm.forward(tape, h, Some(mask))?;
        Ok((tape.dropout(h, self.dropout)?, stats))
    }

    /// One encoder layer: self-attention, residual + layer-norm,
    /// position-wise feed-forward, residual + layer-norm.
    pub fn transformer_encode(&self, tape: &mut Tape<'_>, h: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let (attended, attn) = self.attention.forward(tape, h, mask)?;
        let r1 = tape.add(h, attended)?;
        let h1 = self.norm1.forward(tape, r1)?;
        let f = self.ff1.forward(tape, h1)?;
        let f = tape.relu(f)?;
        let f = self.ff2.forward(tape, f)?;
        let r2 = tape.add(h1, f)?;
        Ok((self.norm2.forward(tape, r2)?, attn))
    }

    pub fn max_pool_latent(&self, tape: &mut Tape<'_>, h: Var, mask: &[bool]) -> Result<Var> {
        tape.masked_max(h, mask)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mask: &[bool]) -> Result<EncoderOutput> {
        let (mut h, bn_stats) = self.embed_inputs(tape, x, mask)?;
        if self.positional_encoding {
            let t = tape.shape(h)[1];
            let pe = tape.input(positional_encoding(t, D_MODEL));
            h = tape.add(h, pe)?;
        }
        let (hidden, attention) = self.transformer_encode(tape, h, mask)?;
        let latent = self.max_pool_latent(tape, hidden, mask)?;
        Ok(EncoderOutput {
            latent,
            hidden,
            attention,
            bn_stats,
        })
    }
}

/// Attention weights of one sequence, restricted to its valid steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// `[heads, queries, keys]`, row-major.
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    /// Extracts sequence `index` (valid length `len`) from batched weights
    /// `[B*H, T, T]`.
    pub fn from_batch(attn: &Tensor, heads: usize, index: usize, len: usize) -> Self {
        let t = attn.shape()[1];
        let mut weights = Vec::with_capacity(heads * len * len);
        for h in 0..heads {
            let g = index * heads + h;
            for i in 0..len {
                let row = &attn.data()[(g * t + i) * t..(g * t + i) * t + len];
                weights.extend_from_slice(row);
            }
        }
        AttentionRecord {
            heads,
            queries: len,
            keys: len,
            weights,
        }
    }

    pub fn weight(&self, head: usize, query: usize, key: usize) -> f64 {
        self.weights[(head * self.queries + query) * self.keys + key]
    }
}

/// `a_t`: attention on step `t` averaged over all queries and heads.
pub fn temporal_attention(record: &AttentionRecord) -> Vec<f64> {
    let mut a = alloc::vec![0.0; record.keys];
    for h in 0..record.heads {
        for i in 0..record.queries {
            for (t, v) in a.iter_mut().enumerate() {
                *v += record.weight(h, i, t);
            }
        }
    }
    let norm = (record.heads * record.queries) as f64;
    a.iter_mut().for_each(|v| *v /= norm);
    a
}
