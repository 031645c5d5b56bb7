//! The full model: three encoders, the alignment module, weighted
//! concatenation and the final prediction head.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{self, AlignmentResult, SharedProjector};
use crate::autodiff::{BatchStats, Mode, Tape, Var};
use crate::batch::ClipBatch;
use crate::data::{FeatureDims, Modality, Task, META_DIM};
use crate::encoder::{AttentionRecord, ModalityEncoder, D_MODEL, N_HEADS};
use crate::error::{Error, Result};
use crate::heterogeneity::weighted_concat;
use crate::nn::{Init, Linear, BATCH_NORM_MOMENTUM};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// BCE clamp bound on predictions.
pub const BCE_EPS: f64 = 1e-7;

/// Ablation switches. The default is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Drop the alignment loss from the total loss.
    pub no_alignment: bool,
    /// Keep the cosine terms, drop the CORAL terms.
    pub no_da_loss: bool,
    /// Fixed weights of 1/3, no reference models.
    pub equal_weights: bool,
    /// Use one modality's latent embedding plus meta features only.
    pub unimodal: Option<Modality>,
}

impl Ablation {
    pub const NAMES: [&'static str; 7] = [
        "full",
        "no_alignment",
        "no_da_loss",
        "equal_weights",
        "unimodal_a",
        "unimodal_v",
        "unimodal_l",
    ];

    pub fn unimodal(m: Modality) -> Self {
        Ablation {
            unimodal: Some(m),
            ..Ablation::default()
        }
    }

    /// Whether reference models drive the modality weights.
    pub fn uses_reference_models(&self) -> bool {
        !self.equal_weights && self.unimodal.is_none()
    }

    pub fn uses_alignment_loss(&self) -> bool {
        !self.no_alignment && self.unimodal.is_none()
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match s {
            "full" => {}
            "no_alignment" => a.no_alignment = true,
            "no_da_loss" => a.no_da_loss = true,
            "equal_weights" => a.equal_weights = true,
            "unimodal_a" => a.unimodal = Some(Modality::Acoustic),
            "unimodal_v" => a.unimodal = Some(Modality::Visual),
            "unimodal_l" => a.unimodal = Some(Modality::Language),
            other => {
                return Err(Error::config(alloc::format!(
                    "unknown ablation `{other}` (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(a)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if self.no_alignment {
            parts.push("no_alignment".into());
        }
        if self.no_da_loss {
            parts.push("no_da_loss".into());
        }
        if self.equal_weights {
            parts.push("equal_weights".into());
        }
        if let Some(m) = self.unimodal {
            parts.push(alloc::format!("unimodal_{}", m.short().to_ascii_lowercase()));
        }
        if parts.is_empty() {
            f.write_str("full")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub dims: FeatureDims,
    pub ablation: Ablation,
    pub dropout: f64,
    pub positional_encoding: bool,
}

impl ModelConfig {
    pub fn new(task: Task, dims: FeatureDims) -> Self {
        ModelConfig {
            task,
            dims,
            ablation: Ablation::default(),
            dropout: 0.4,
            positional_encoding: true,
        }
    }

    /// Width of the final head input.
    pub fn head_input_dim(&self) -> usize {
        match self.ablation.unimodal {
            Some(_) => D_MODEL + META_DIM,
            None => alignment::D_SHARED + 3 * D_MODEL + META_DIM,
        }
    }

    /// Modalities whose encoders take part in the forward pass.
    pub fn active_modalities(&self) -> Vec<Modality> {
        match self.ablation.unimodal {
            Some(m) => alloc::vec![m],
            None => Modality::ALL.to_vec(),
        }
    }
}

/// FC16+ReLU (+dropout), FC8+ReLU, FC1+sigmoid.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub dropout: f64,
}

impl PredictionHead {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_dim: usize, dropout: f64, rng: &mut R) -> Self {
        PredictionHead {
            fc1: Linear::new(store, "head.fc1", in_dim, 16, Init::FanIn, rng),
            fc2: Linear::new(store, "head.fc2", 16, 8, Init::FanIn, rng),
            fc3: Linear::new(store, "head.fc3", 8, 1, Init::FanIn, rng),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, self.dropout)?;
        let h = self.fc2.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = self.fc3.forward(tape, h)?;
        tape.sigmoid(h)
    }
}

#[derive(Clone, Debug)]
pub struct M2P2Model {
    pub config: ModelConfig,
    /// Fusion parameters; reference models keep their own stores.
    pub params: ParamStore,
    pub encoders: [ModalityEncoder; 3],
    pub projector: SharedProjector,
    pub head: PredictionHead,
}

/// Tape handles from one forward pass. Per-modality entries are `None` for
/// modalities a unimodal ablation skips.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, 1]` in `(0, 1)`.
    pub pred: Var,
    pub latents: [Option<Var>; 3],
    pub attention: [Option<Var>; 3],
    pub shared: Option<[Var; 3]>,
    pub h_align: Option<Var>,
    pub h_het: Option<Var>,
    pub bn_stats: [Option<BatchStats>; 3],
}

impl ForwardOutput {
    /// `[L_A, L_V, L_L]`, or an error if a latent was not computed.
    pub fn all_latents(&self) -> Result<[Var; 3]> {
        match self.latents {
            [Some(a), Some(v), Some(l)] => Ok([a, v, l]),
            _ => Err(Error::invalid("latents for all three modalities are required")),
        }
    }
}

/// Scalar loss handles.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub pers: Var,
    /// `None` when the alignment loss is switched off.
    pub align: Option<AlignmentResult>,
}

impl M2P2Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let encoders = Modality::ALL.map(|m| {
            ModalityEncoder::new(
                &mut params,
                m,
                config.dims.get(m),
                config.positional_encoding,
                config.dropout,
                rng,
            )
        });
        let projector = SharedProjector::new(&mut params, config.dropout, rng);
        let head = PredictionHead::new(&mut params, config.head_input_dim(), config.dropout, rng);
        M2P2Model {
            config,
            params,
            encoders,
            projector,
            head,
        }
    }

    pub fn encoder(&self, m: Modality) -> &ModalityEncoder {
        &self.encoders[m.index()]
    }

    pub fn forward(&self, tape: &mut Tape<'_>, batch: &ClipBatch, weights: [f64; 3]) -> Result<ForwardOutput> {
        if batch.task != self.config.task {
            return Err(Error::config(alloc::format!(
                "batch task {} does not match model task {}",
                batch.task,
                self.config.task
            )));
        }
        let mut latents = [None; 3];
        let mut attention = [None; 3];
        let mut bn_stats: [Option<BatchStats>; 3] = [None, None, None];
        for m in self.config.active_modalities() {
            let stream = batch.stream(m);
            let x = tape.input(stream.features.clone());
            let out = self.encoders[m.index()].forward(tape, x, &stream.mask)?;
            latents[m.index()] = Some(out.latent);
            attention[m.index()] = Some(out.attention);
            bn_stats[m.index()] = out.bn_stats;
        }
        let meta = tape.input(batch.meta.clone());

        let (head_in, shared, h_align, h_het) = match self.config.ablation.unimodal {
            Some(m) => {
                let lat = latents[m.index()].expect("active modality");
                (tape.concat(&[lat, meta])?, None, None, None)
            }
            None => {
                let lat = [latents[0].unwrap(), latents[1].unwrap(), latents[2].unwrap()];
                let shared = [
                    self.projector.forward(tape, lat[0])?,
                    self.projector.forward(tape, lat[1])?,
                    self.projector.forward(tape, lat[2])?,
                ];
                let h_align = alignment::fuse_aligned(tape, &shared)?;
                let w = if self.config.ablation.equal_weights { [1.0 / 3.0; 3] } else { weights };
                let h_het = weighted_concat(tape, &lat, w)?;
                let x = tape.concat(&[h_align, h_het, meta])?;
                (x, Some(shared), Some(h_align), Some(h_het))
            }
        };
        let pred = self.head.forward(tape, head_in)?;
        Ok(ForwardOutput {
            pred,
            latents,
            attention,
            shared,
            h_align,
            h_het,
            bn_stats,
        })
    }

    /// `L_pers + gamma * L_align`, with the alignment term dropped by the
    /// ablation switches.
    pub fn loss(&self, tape: &mut Tape<'_>, out: &ForwardOutput, batch: &ClipBatch, gamma: f64) -> Result<LossParts> {
        let target = tape.input(batch.targets.clone());
        let pers = persuasion_loss(tape, out.pred, target, self.config.task)?;
        let ablation = &self.config.ablation;
        let align = match (&out.shared, ablation.uses_alignment_loss()) {
            (Some(shared), true) => {
                let (loss, pairs) = alignment::alignment_loss(tape, shared, !ablation.no_da_loss)?;
                Some(AlignmentResult {
                    h_align: out.h_align.expect("aligned"),
                    loss,
                    pairs,
                })
            }
            _ => None,
        };
        let total = match &align {
            Some(a) => total_loss(tape, pers, a.loss, gamma)?,
            None => pers,
        };
        Ok(LossParts { total, pers, align })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[Option<BatchStats>; 3]) {
        for (enc, s) in self.encoders.iter_mut().zip(stats) {
            if let Some(s) = s {
                enc.embed_norm.running.update(s, BATCH_NORM_MOMENTUM);
            }
        }
    }

    /// Eval-mode inference over a batch.
    pub fn infer(&self, batch: &ClipBatch, weights: [f64; 3]) -> Result<Inference> {
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let out = self.forward(&mut tape, batch, weights)?;
        let probs = tape.value(out.pred).data().to_vec();
        let latents = out.latents.map(|v| v.map(|v| tape.value(v).clone()));
        let shared = out.shared.map(|s| s.map(|v| tape.value(v).clone()));
        let mut attention: [Vec<AttentionRecord>; 3] = Default::default();
        for m in Modality::ALL {
            if let Some(a) = out.attention[m.index()] {
                let a = tape.value(a);
                let lengths = &batch.stream(m).lengths;
                attention[m.index()] = lengths
                    .iter()
                    .enumerate()
                    .map(|(i, &len)| AttentionRecord::from_batch(a, N_HEADS, i, len))
                    .collect();
            }
        }
        Ok(Inference {
            predictions: probs.iter().map(|&p| self.config.task.from_unit(p)).collect(),
            probs,
            latents,
            shared,
            attention,
        })
    }
}

/// Values copied out of an eval-mode pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Sigmoid outputs.
    pub probs: Vec<f64>,
    /// Outputs mapped back to the task's label space.
    pub predictions: Vec<f64>,
    pub latents: [Option<Tensor>; 3],
    pub shared: Option<[Tensor; 3]>,
    pub attention: [Vec<AttentionRecord>; 3],
}

/// MSE for IPP, binary cross-entropy (predictions clamped) for DOP.
pub fn persuasion_loss(tape: &mut Tape<'_>, pred: Var, target: Var, task: Task) -> Result<Var> {
    match task {
        Task::Ipp => crate::heterogeneity::mse_node(tape, pred, target),
        Task::Dop => {
            let y = tape.value(target).clone();
            let not_y = tape.input(y.map(|v| 1.0 - v));
            let p = tape.clamp(pred, BCE_EPS, 1.0 - BCE_EPS)?;
            let log_p = tape.log(p)?;
            let q = tape.affine(p, -1.0, 1.0)?;
            let log_q = tape.log(q)?;
            let a = tape.mul(target, log_p)?;
            let b = tape.mul(not_y, log_q)?;
            let s = tape.add(a, b)?;
            let m = tape.mean_all(s)?;
            tape.scale(m, -1.0)
        }
    }
}

/// `L_pers + gamma * L_align`.
pub fn total_loss(tape: &mut Tape<'_>, pers: Var, align: Var, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::config(alloc::format!("gamma must be >= 0, got {gamma}")));
    }
    let g = tape.scale(align, gamma)?;
    tape.add(pers, g)
}
