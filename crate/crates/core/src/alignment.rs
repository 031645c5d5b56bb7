//! Shared projection of latent embeddings and the cosine + CORAL alignment
//! loss between every pair of modalities.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Modality;
use crate::encoder::D_MODEL;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::params::ParamStore;

/// Width of the shared embedding space.
pub const D_SHARED: usize = 16;

/// Unordered modality pairs in loss order.
pub const PAIRS: [(Modality, Modality); 3] = [
    (Modality::Acoustic, Modality::Visual),
    (Modality::Acoustic, Modality::Language),
    (Modality::Visual, Modality::Language),
];

/// One FC16 + ReLU applied with the same weights to every modality.
#[derive(Clone, Debug)]
pub struct SharedProjector {
    pub fc: Linear,
    pub dropout: f64,
}

impl SharedProjector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dropout: f64, rng: &mut R) -> Self {
        SharedProjector {
            fc: Linear::new(store, "shared.fc", D_MODEL, D_SHARED, Init::FanIn, rng),
            dropout,
        }
    }

    /// `[B, 16] -> [B, 16]`
    pub fn forward(&self, tape: &mut Tape<'_>, latent: Var) -> Result<Var> {
        let h = self.fc.forward(tape, latent)?;
        let h = tape.relu(h)?;
        tape.dropout(h, self.dropout)
    }
}

fn check_pair(tape: &Tape<'_>, node: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape(node, format!("batches {sa:?} and {sb:?} must be equal [B, d]")));
    }
    Ok((sa[0], sa[1]))
}

/// Batch mean of `1 - cos(a_i, b_i)`. A zero row has cosine 0.
pub fn cosine_loss(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, "cosine_loss", a, b)?;
    let cos = tape.cosine_rows(a, b)?;
    let mean = tape.mean_all(cos)?;
    tape.affine(mean, -1.0, 1.0)
}

/// Sample covariance `(X^T X - s^T s / B) / (B - 1)` with `s = 1^T X`.
pub fn covariance(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 2 {
        return Err(Error::shape("covariance", format!("expected [B, d], got {s:?}")));
    }
    let b = s[0];
    if b < 2 {
        return Err(Error::CoralBatch(b));
    }
    let d = s[1];
    let xt = tape.permute(x, &[1, 0])?;
    let xtx = tape.matmul(xt, x)?;
    let col_sum = tape.mean_rows(x)?;
    let col_sum = tape.scale(col_sum, b as f64)?;
    let s_col = tape.reshape(col_sum, &[d, 1])?;
    let s_row = tape.reshape(col_sum, &[1, d])?;
    let outer = tape.matmul(s_col, s_row)?;
    let outer = tape.scale(outer, 1.0 / b as f64)?;
    let centered = tape.sub(xtx, outer)?;
    tape.scale(centered, 1.0 / (b - 1) as f64)
}

/// Deep CORAL: `||C_a - C_b||_F^2 / (4 d^2)`.
pub fn coral_loss(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let (n, d) = check_pair(tape, "coral_loss", a, b)?;
    if n < 2 {
        return Err(Error::CoralBatch(n));
    }
    let ca = covariance(tape, a)?;
    let cb = covariance(tape, b)?;
    let diff = tape.sub(ca, cb)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, 1.0 / (4.0 * (d * d) as f64))
}

/// Loss handles for one modality pair.
#[derive(Clone, Copy, Debug)]
pub struct PairLoss {
    pub pair: (Modality, Modality),
    pub cosine: Var,
    pub coral: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct AlignmentResult {
    /// `[B, 16]`
    pub h_align: Var,
    /// Scalar sum over pairs.
    pub loss: Var,
    pub pairs: Vec<PairLoss>,
}

/// Sum over the three pairs of `l_cos + l_da`; `use_coral = false` drops the
/// CORAL terms.
pub fn alignment_loss(tape: &mut Tape<'_>, shared: &[Var; 3], use_coral: bool) -> Result<(Var, Vec<PairLoss>)> {
    let mut pairs = Vec::with_capacity(3);
    let mut total: Option<Var> = None;
    for (m, n) in PAIRS {
        let (a, b) = (shared[m.index()], shared[n.index()]);
        let cosine = cosine_loss(tape, a, b)?;
        let mut term = cosine;
        let coral = if use_coral {
            let c = coral_loss(tape, a, b)?;
            term = tape.add(term, c)?;
            Some(c)
        } else {
            None
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        pairs.push(PairLoss {
            pair: (m, n),
            cosine,
            coral,
        });
    }
    Ok((total.expect("three pairs"), pairs))
}

/// Elementwise mean of the three shared embeddings.
pub fn fuse_aligned(tape: &mut Tape<'_>, shared: &[Var; 3]) -> Result<Var> {
    let sum = tape.add(shared[0], shared[1])?;
    let sum = tape.add(sum, shared[2])?;
    tape.scale(sum, 1.0 / 3.0)
}

/// Projects, pools and scores the three latent batches.
pub fn align(
    tape: &mut Tape<'_>,
    projector: &SharedProjector,
    latents: &[Var; 3],
    use_coral: bool,
) -> Result<(AlignmentResult, [Var; 3])> {
    let shared = [
        projector.forward(tape, latents[0])?,
        projector.forward(tape, latents[1])?,
        projector.forward(tape, latents[2])?,
    ];
    let (loss, pairs) = alignment_loss(tape, &shared, use_coral)?;
    let h_align = fuse_aligned(tape, &shared)?;
    Ok((AlignmentResult { h_align, loss, pairs }, shared))
}

/// Mean pairwise cosine similarity over the three pairs and all rows.
pub fn mean_pairwise_cosine(shared: &[&[f64]; 3], dim: usize) -> f64 {
    let rows = shared[0].len() / dim;
    let mut total = 0.0;
    for (m, n) in PAIRS {
        for r in 0..rows {
            let a = &shared[m.index()][r * dim..(r + 1) * dim];
            let b = &shared[n.index()][r * dim..(r + 1) * dim];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = libm::sqrt(a.iter().map(|x| x * x).sum());
            let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
            if na > 0.0 && nb > 0.0 {
                total += dot / (na * nb);
            }
        }
    }
    total / (3 * rows) as f64
}
