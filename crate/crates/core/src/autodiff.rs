//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tape`] evaluates immediately and records the node
//! it produced. [`Tape::backward`] walks the recorded nodes once, in reverse,
//! accumulating vector-Jacobian products.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    BatchNorm { x: Var, inv_std: Vec<f64>, valid: Option<Vec<bool>>, n_valid: usize },
    Dropout { x: Var, scale: Vec<f64> },
    MaskedMax { x: Var, argmax: Vec<usize> },
    MaskedMean { x: Var, counts: Vec<f64>, mask: Vec<bool> },
    MeanRows(Var),
    SumAll(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Cosine { a: Var, b: Var, stats: Vec<(f64, f64, f64)> },
    Frobenius(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a train-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for running estimates.
    pub var: Vec<f64>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// All-zero gradients for every parameter of `store`.
    pub fn zeros(store: &ParamStore) -> Self {
        Gradients {
            params: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            nodes: Vec::new(),
        }
    }

    /// Gradient for a parameter; zeros when the parameter did not take part.
    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.index()]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Gradient with respect to any recorded node (e.g. an input leaf).
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }
}

/// Recording of one forward evaluation.
pub struct Tape<'a> {
    params: &'a ParamStore,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Self::with_seed(params, mode, 0)
    }

    /// Tape whose dropout masks are drawn from `seed`.
    pub fn with_seed(params: &'a ParamStore, mode: Mode, seed: u64) -> Self {
        Tape {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.numel(), 1, "item() on a non-scalar node");
        t.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, node: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(node));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-trainable leaf (inputs, constants, masks).
    pub fn input(&mut self, value: Tensor) -> Var {
        assert!(value.is_finite(), "non-finite input leaf");
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a trainable parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.params.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `a[.., k] x b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).numel() / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; rows * n];
        mm_nn(self.value(a).data(), self.value(b).data(), rows, k, n, &mut out);
        let value = Tensor::new(&out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b })
    }

    /// Batched `a[G, m, k] x b[G, k, n]`, or `x b[G, n, k]^T` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})")));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for gi in 0..g {
                let ag = &ad[gi * m * k..(gi + 1) * m * k];
                let bg = &bd[gi * k * n..(gi + 1) * k * n];
                let og = &mut out[gi * m * n..(gi + 1) * m * n];
                if transpose_b {
                    mm_nt(ag, bg, m, k, n, og);
                } else {
                    mm_nn(ag, bg, m, k, n, og);
                }
            }
        }
        let value = Tensor::new(&[g, m, n], out)?;
        self.push("bmm", value, Op::BatchMatMul { a, b, transpose_b })
    }

    fn check_broadcast(&self, node: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if suffix || self.value(b).numel() == 1 {
            Ok(())
        } else {
            Err(Error::shape(node, format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    /// Elementwise `a + b`; `b` may be a trailing-suffix (or scalar) broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.numel();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % nb];
        }
        self.push("add", out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.numel();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= bv.data()[i % nb];
        }
        self.push("mul", out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push("affine", out, Op::Affine { x, scale })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(libm::exp);
        self.push("exp", out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::shape("log", "non-positive input"));
        }
        let out = self.value(x).map(libm::log);
        self.push("log", out, Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last axis. Positions with `mask[i] == false` get
    /// probability exactly zero; a row with no valid position is an error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(Error::shape("softmax", "mask length differs from input"));
            }
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let valid = |j: usize| mask.is_none_or(|m| m[r * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::shape("softmax", format!("row {r} is fully masked")));
            }
            let o = &mut out.data_mut()[r * c..(r + 1) * c];
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) {
                    o[j] = libm::exp(v - max);
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        self.push("softmax", out, Op::Softmax(x))
    }

    /// Normalizes each row (last axis) to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / libm::sqrt(var + eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push("layer_norm", out, Op::LayerNorm { x, inv_std })
    }

    /// Train-mode batch normalization over rows (all leading axes), per
    /// column. Statistics use only rows with `row_mask[r] == true`; masked
    /// rows are transformed with the same affine map.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        row_mask: Option<&[bool]>,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if let Some(m) = row_mask {
            if m.len() != rows {
                return Err(Error::shape("batch_norm", "row mask length differs from rows"));
            }
        }
        let valid = |r: usize| row_mask.is_none_or(|m| m[r]);
        let n = (0..rows).filter(|&r| valid(r)).count();
        if n < 2 {
            return Err(Error::shape("batch_norm", format!("needs >= 2 valid rows, got {n}")));
        }
        let mut mean = vec![0.0; c];
        for r in (0..rows).filter(|&r| valid(r)) {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in (0..rows).filter(|&r| valid(r)) {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / n as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|s| s / (n - 1) as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut out = xv.clone();
        for r in 0..rows {
            for (j, v) in out.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            inv_std,
            valid: row_mask.map(<[bool]>::to_vec),
            n_valid: n,
        };
        let v = self.push("batch_norm", out, op)?;
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Inverted dropout: active only in train mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::shape("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let scale: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        for (o, s) in out.data_mut().iter_mut().zip(&scale) {
            *o *= s;
        }
        self.push("dropout", out, Op::Dropout { x, scale })
    }

    fn seq_dims(&self, node: &'static str, x: Var, mask: &[bool]) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::shape(node, format!("expects [B,T,C] with [B*T] mask, got {s:?}")));
        }
        let (b, t) = (s[0], s[1]);
        for bi in 0..b {
            if !mask[bi * t..(bi + 1) * t].iter().any(|&m| m) {
                return Err(Error::shape(node, format!("sequence {bi} is fully masked")));
            }
        }
        Ok((b, t, s[2]))
    }

    /// Max over the time axis of `[B, T, C]`, ignoring masked steps.
    pub fn masked_max(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (b, t, c) = self.seq_dims("masked_max", x, mask)?;
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; b * c];
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            for ti in (0..t).filter(|&ti| mask[bi * t + ti]) {
                for ci in 0..c {
                    let idx = (bi * t + ti) * c + ci;
                    if xd[idx] > out[bi * c + ci] {
                        out[bi * c + ci] = xd[idx];
                        argmax[bi * c + ci] = idx;
                    }
                }
            }
        }
        let value = Tensor::new(&[b, c], out)?;
        self.push("masked_max", value, Op::MaskedMax { x, argmax })
    }

    /// Mean over the time axis of `[B, T, C]`, ignoring masked steps.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (b, t, c) = self.seq_dims("masked_mean", x, mask)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c];
        let mut counts = vec![0.0; b];
        for bi in 0..b {
            for ti in (0..t).filter(|&ti| mask[bi * t + ti]) {
                counts[bi] += 1.0;
                for ci in 0..c {
                    out[bi * c + ci] += xd[(bi * t + ti) * c + ci];
                }
            }
            for ci in 0..c {
                out[bi * c + ci] /= counts[bi];
            }
        }
        let value = Tensor::new(&[b, c], out)?;
        let op = Op::MaskedMean {
            x,
            counts,
            mask: mask.to_vec(),
        };
        self.push("masked_mean", value, op)
    }

    /// Column means over all rows: `[.., C] -> [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let value = Tensor::new(&[c], out)?;
        self.push("mean_rows", value, Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != *lead {
                return Err(Error::shape("concat", format!("{s:?} vs leading {lead:?}")));
            }
        }
        let rows = self.value(first).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        self.push("concat", value, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))))?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("bad permutation {perm:?} for {s:?}")));
        }
        let value = permute_tensor(self.value(x), perm);
        self.push("permute", value, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Row-wise cosine similarity of `[.., D]` tensors, giving one value per
    /// row. A zero-norm row has similarity 0 and passes no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("cosine", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let rows = av.rows();
        let mut stats = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        let mut degenerate = 0usize;
        for r in 0..rows {
            let (x, y) = (av.row(r), bv.row(r));
            let na = libm::sqrt(x.iter().map(|v| v * v).sum());
            let nb = libm::sqrt(y.iter().map(|v| v * v).sum());
            let cos = if na == 0.0 || nb == 0.0 {
                degenerate += 1;
                0.0
            } else {
                x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (na * nb)
            };
            stats.push((na, nb, cos));
            out.push(cos);
        }
        if degenerate > 0 {
            log::warn!("cosine similarity: {degenerate} zero-norm row(s) treated as similarity 0");
        }
        let value = Tensor::vector(out)?;
        self.push("cosine", value, Op::Cosine { a, b, stats })
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Result<Var> {
        let n = libm::sqrt(self.value(x).data().iter().map(|v| v * v).sum());
        self.push("frobenius", Tensor::scalar(n), Op::Frobenius(x))
    }

    /// Hash of every branch taken by piecewise ops: ReLU signs, clamp
    /// regions, max-pool winners and zero-norm cosine rows. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    feed(i as u64);
                    self.value(*x).data().iter().for_each(|&v| feed(u64::from(v > 0.0)));
                }
                Op::Clamp { x, lo, hi } => {
                    feed(i as u64);
                    for &v in self.value(*x).data() {
                        feed(if v < *lo { 0 } else if v > *hi { 2 } else { 1 });
                    }
                }
                Op::MaskedMax { argmax, .. } => {
                    feed(i as u64);
                    argmax.iter().for_each(|&k| feed(k as u64));
                }
                Op::Cosine { stats, .. } => {
                    feed(i as u64);
                    stats.iter().for_each(|&(na, nb, _)| feed(u64::from(na == 0.0 || nb == 0.0)));
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .ids()
            .map(|id| match self.param_vars[id.index()] {
                Some(v) => grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape())),
                None => Tensor::zeros(self.params.get(id).shape()),
            })
            .collect();
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.numel() / k;
                let mut da = vec![0.0; rows * k];
                mm_nt(gd, bv.data(), rows, n, k, &mut da);
                let mut db = vec![0.0; k * n];
                mm_tn(av.data(), gd, rows, k, n, &mut db);
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = y.shape()[2];
                let mut da = vec![0.0; gn * m * k];
                let mut db = vec![0.0; gn * k * n];
                for gi in 0..gn {
                    let ag = &av.data()[gi * m * k..(gi + 1) * m * k];
                    let bg = &bv.data()[gi * k * n..(gi + 1) * k * n];
                    let gg = &gd[gi * m * n..(gi + 1) * m * n];
                    let dag = &mut da[gi * m * k..(gi + 1) * m * k];
                    let dbg = &mut db[gi * k * n..(gi + 1) * k * n];
                    if *transpose_b {
                        // b_g is [n, k]
                        mm_nn(gg, bg, m, n, k, dag);
                        mm_tn(gg, ag, m, n, k, dbg);
                    } else {
                        mm_nt(gg, bg, m, n, k, dag);
                        mm_tn(ag, gg, m, k, n, dbg);
                    }
                }
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Add { a, b } => {
                let nb = self.value(*b).numel();
                let mut db = vec![0.0; nb];
                for (j, v) in gd.iter().enumerate() {
                    db[j % nb] += v;
                }
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, self.shape(*b), db);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.numel();
                let mut da = vec![0.0; gd.len()];
                let mut db = vec![0.0; nb];
                for (j, v) in gd.iter().enumerate() {
                    da[j] = v * bv.data()[j % nb];
                    db[j % nb] += v * av.data()[j];
                }
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Affine { x, scale } => {
                accumulate(grads, *x, g.shape(), gd.iter().map(|v| v * scale).collect());
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = gd.iter().zip(xd).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Sigmoid(x) => {
                let dx = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Exp(x) => {
                let dx = gd.iter().zip(y.data()).map(|(g, e)| g * e).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                let dx = gd.iter().zip(xd).map(|(g, v)| g / v).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xd)
                    .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let mut dx = vec![0.0; gd.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols();
                let mut dx = vec![0.0; gd.len()];
                for (r, s) in inv_std.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gy: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dx[r * c + j] = s / c as f64 * (c as f64 * gr[j] - sum_g - yr[j] * sum_gy);
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::BatchNorm {
                x,
                inv_std,
                valid,
                n_valid,
            } => {
                let (rows, c) = (y.rows(), y.cols());
                let n = *n_valid as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gy = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        let gv = gd[r * c + j];
                        sum_g[j] += gv;
                        sum_gy[j] += gv * y.data()[r * c + j];
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let in_stats = valid.as_ref().is_none_or(|m| m[r]);
                    for j in 0..c {
                        let idx = r * c + j;
                        let s = inv_std[j];
                        let mut v = s * gd[idx];
                        if in_stats {
                            v -= s / n * (sum_g[j] + y.data()[idx] * sum_gy[j]);
                        }
                        dx[idx] = v;
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Dropout { x, scale } => {
                let dx = gd.iter().zip(scale).map(|(g, s)| g * s).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::MaskedMax { x, argmax } => {
                let xs = self.shape(*x);
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                accumulate(grads, *x, xs, dx);
            }
            Op::MaskedMean { x, counts, mask } => {
                let xs = self.shape(*x);
                let (b, t, c) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![0.0; b * t * c];
                for bi in 0..b {
                    for ti in (0..t).filter(|&ti| mask[bi * t + ti]) {
                        for ci in 0..c {
                            dx[(bi * t + ti) * c + ci] = gd[bi * c + ci] / counts[bi];
                        }
                    }
                }
                accumulate(grads, *x, xs, dx);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (rows, c) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; rows * c];
                for r in 0..rows {
                    for j in 0..c {
                        dx[r * c + j] = gd[j] / rows as f64;
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::SumAll(x) => {
                let xs = self.shape(*x);
                accumulate(grads, *x, xs, vec![gd[0]; self.value(*x).numel()]);
            }
            Op::Concat(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + pc]);
                    }
                    accumulate(grads, p, self.shape(p), dp);
                    offset += pc;
                }
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, self.shape(*x), gd.to_vec());
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let dx = permute_tensor(g, &inverse);
                accumulate(grads, *x, self.shape(*x), dx.into_data());
            }
            Op::Cosine { a, b, stats } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                for (r, &(na, nb, cos)) in stats.iter().enumerate() {
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let (x, z) = (av.row(r), bv.row(r));
                    for j in 0..c {
                        da[r * c + j] = gd[r] * (z[j] / (na * nb) - cos * x[j] / (na * na));
                        db[r * c + j] = gd[r] * (x[j] / (na * nb) - cos * z[j] / (nb * nb));
                    }
                }
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Frobenius(x) => {
                let norm = y.data()[0];
                let xv = self.value(*x);
                let dx = if norm == 0.0 {
                    vec![0.0; xv.numel()]
                } else {
                    xv.data().iter().map(|v| gd[0] * v / norm).collect()
                };
                accumulate(grads, *x, xv.shape(), dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape, delta).expect("gradient shape matches node"));
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let rank = s.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    let data = t.data();
    for _ in 0..t.numel() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves size")
}
