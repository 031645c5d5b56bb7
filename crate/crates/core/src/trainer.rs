//! Interactive master/slave training: the fusion model is updated on the
//! training set, then the reference models are fitted on frozen latent
//! embeddings and their validation losses refresh the modality weights.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::batch::ClipBatch;
use crate::data::{FeatureClip, FeatureDims, Modality, Task};
use crate::encoder::AttentionRecord;
use crate::error::{Error, Result};
use crate::fusion::{Ablation, M2P2Model, ModelConfig};
use crate::heterogeneity::{reference_loss, ModalityWeights, ReferenceModel};
use crate::metrics;
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Which split the reference models are fitted on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefSplit {
    Train,
    #[default]
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Master epochs `N`.
    pub epochs: usize,
    /// Slave epochs `n` per master epoch.
    pub slave_epochs: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub ref_train_on: RefSplit,
    pub dropout: f64,
    pub positional_encoding: bool,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            weight_decay: 1e-5,
            epochs: 200,
            slave_epochs: 10,
            gamma: 0.1,
            alpha: 0.5,
            beta: 50.0,
            batch_size: 32,
            seed: 0,
            ablation: Ablation::default(),
            ref_train_on: RefSplit::Val,
            dropout: 0.4,
            positional_encoding: true,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("beta", self.beta)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience must be >= 1"));
        }
        Ok(())
    }

    pub fn model_config(&self, task: Task, dims: FeatureDims) -> ModelConfig {
        ModelConfig {
            task,
            dims,
            ablation: self.ablation,
            dropout: self.dropout,
            positional_encoding: self.positional_encoding,
        }
    }
}

/// One row of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_final: f64,
    pub loss_pers: f64,
    /// Unscaled alignment loss; 0 when switched off.
    pub loss_align: f64,
    /// MSE (IPP) or accuracy (DOP) on the validation set.
    pub val_metric: f64,
    /// Weights after this epoch's update.
    pub weights: [f64; 3],
    /// Reference validation losses that drove the update.
    pub ref_losses: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: M2P2Model,
    pub references: Option<[ReferenceModel; 3]>,
    pub weights: ModalityWeights,
    pub history: TrainHistory,
}

impl TrainedModel {
    /// Weights the model was trained to use at inference.
    pub fn inference_weights(&self) -> [f64; 3] {
        if self.model.config.ablation.equal_weights {
            [1.0 / 3.0; 3]
        } else {
            self.weights.w
        }
    }

    pub fn predict(&self, clips: &[&FeatureClip]) -> Result<ClipInference> {
        infer_clips(&self.model, clips, self.inference_weights())
    }
}

/// Eval-mode outputs for a list of clips, in input order.
#[derive(Clone, Debug)]
pub struct ClipInference {
    pub clip_ids: Vec<String>,
    pub labels: Vec<f64>,
    /// Predictions in label space.
    pub predictions: Vec<f64>,
    /// `[N, 16]` per active modality.
    pub latents: [Option<Tensor>; 3],
    /// `[N, 16]` shared projections, when the alignment module ran.
    pub shared: Option<[Tensor; 3]>,
    pub attention: [Vec<AttentionRecord>; 3],
}

const INFER_CHUNK: usize = 64;

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&[data.len() / cols, cols], data)
}

/// Runs eval-mode inference in chunks and concatenates the results.
pub fn infer_clips(model: &M2P2Model, clips: &[&FeatureClip], weights: [f64; 3]) -> Result<ClipInference> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let task = model.config.task;
    let mut predictions = Vec::with_capacity(clips.len());
    let mut latents: [Vec<Tensor>; 3] = Default::default();
    let mut shared: [Vec<Tensor>; 3] = Default::default();
    let mut attention: [Vec<AttentionRecord>; 3] = Default::default();
    for chunk in clips.chunks(INFER_CHUNK) {
        let batch = ClipBatch::new(task, chunk)?;
        let inf = model.infer(&batch, weights)?;
        predictions.extend(inf.predictions);
        for m in 0..3 {
            if let Some(l) = &inf.latents[m] {
                latents[m].push(l.clone());
            }
            if let Some(s) = &inf.shared {
                shared[m].push(s[m].clone());
            }
        }
        for (dst, src) in attention.iter_mut().zip(inf.attention) {
            dst.extend(src);
        }
    }
    let mut stacked: [Option<Tensor>; 3] = Default::default();
    for (dst, parts) in stacked.iter_mut().zip(&latents) {
        if !parts.is_empty() {
            *dst = Some(stack(parts)?);
        }
    }
    let shared = if shared[0].is_empty() {
        None
    } else {
        Some([stack(&shared[0])?, stack(&shared[1])?, stack(&shared[2])?])
    };
    Ok(ClipInference {
        clip_ids: clips.iter().map(|c| c.clip_id.clone()).collect(),
        labels: clips.iter().map(|c| c.label).collect(),
        predictions,
        latents: stacked,
        shared,
        attention,
    })
}

/// Splits a shuffled order into minibatches. A trailing batch of one clip is
/// merged into the previous batch so every batch has at least two rows.
pub fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out[out.len() - 1].len() == 1 {
        let start = (out.len() - 2) * batch_size;
        out.pop();
        out.pop();
        out.push(&order[start..]);
    }
    out
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Divergence { epoch, what },
        other => other,
    }
}

/// Validation-set metric of the current model.
pub fn evaluate(model: &M2P2Model, clips: &[&FeatureClip], weights: [f64; 3]) -> Result<f64> {
    let inf = infer_clips(model, clips, weights)?;
    metrics::task_metric(model.config.task, &inf.labels, &inf.predictions)
}

/// Runs training. `task` and `dims` come from the dataset.
pub fn train(
    config: &TrainConfig,
    task: Task,
    dims: FeatureDims,
    train_set: &[&FeatureClip],
    val_set: &[&FeatureClip],
) -> Result<TrainedModel> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut ref_rng = ChaCha8Rng::seed_from_u64(config.seed);
    ref_rng.set_stream(2);

    let mut model = M2P2Model::new(config.model_config(task, dims), &mut init_rng);
    let mut adam = Adam::new(&model.params, config.lr, config.weight_decay);
    let use_refs = config.ablation.uses_reference_models();
    let mut references = use_refs.then(|| Modality::ALL.map(|m| ReferenceModel::new(m, config.dropout, &mut init_rng)));
    let mut ref_adams: Option<Vec<Adam>> = references
        .as_ref()
        .map(|refs| refs.iter().map(|r| Adam::new(&r.params, config.lr, config.weight_decay)).collect());
    let mut weights = ModalityWeights::new(config.alpha, config.beta);

    let ref_fit_set = match config.ref_train_on {
        RefSplit::Train => train_set,
        RefSplit::Val => val_set,
    };
    let fit_targets: Vec<f64> = ref_fit_set.iter().map(|c| task.to_unit(c.label)).collect();
    let val_targets: Vec<f64> = val_set.iter().map(|c| task.to_unit(c.label)).collect();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let on_err = diverged(epoch);
        order.shuffle(&mut order_rng);
        let (mut sum_final, mut sum_pers, mut sum_align) = (0.0, 0.0, 0.0);
        let w_master = weights.w;
        for idx in minibatches(&order, config.batch_size) {
            let clips: Vec<&FeatureClip> = idx.iter().map(|&i| train_set[i]).collect();
            let batch = ClipBatch::new(task, &clips)?;
            let seed: u64 = order_rng.random();
            let (grads, stats, parts) = {
                let mut tape = Tape::with_seed(&model.params, Mode::Train, seed);
                let out = model.forward(&mut tape, &batch, w_master).map_err(&on_err)?;
                let loss = model.loss(&mut tape, &out, &batch, config.gamma).map_err(&on_err)?;
                let parts = (
                    tape.item(loss.total),
                    tape.item(loss.pers),
                    loss.align.as_ref().map_or(0.0, |a| tape.item(a.loss)),
                );
                (tape.backward(loss.total)?, out.bn_stats, parts)
            };
            if grads.params().iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, what: "gradient" });
            }
            adam.step(&mut model.params, &grads);
            if !model.params.iter().all(|(_, _, t)| t.is_finite()) {
                return Err(Error::Divergence { epoch, what: "parameter" });
            }
            model.apply_bn_stats(&stats);
            let b = clips.len() as f64;
            sum_final += parts.0 * b;
            sum_pers += parts.1 * b;
            sum_align += parts.2 * b;
        }
        let n = train_set.len() as f64;

        let mut ref_losses = None;
        if let (Some(refs), Some(adams)) = (references.as_mut(), ref_adams.as_mut()) {
            let fit = infer_clips(&model, ref_fit_set, weights.w).map_err(&on_err)?;
            let val = infer_clips(&model, val_set, weights.w).map_err(&on_err)?;
            let mut losses = [0.0; 3];
            for (m, (r, a)) in refs.iter_mut().zip(adams.iter_mut()).enumerate() {
                let x = fit.latents[m].as_ref().expect("all modalities active");
                for _ in 0..config.slave_epochs {
                    r.fit_epoch(a, x, &fit_targets, config.batch_size, &mut ref_rng)
                        .map_err(&on_err)?;
                }
                let xv = val.latents[m].as_ref().expect("all modalities active");
                losses[m] = reference_loss(r, xv, &val_targets).map_err(&on_err)?;
            }
            weights.update(losses);
            ref_losses = Some(losses);
        }

        let w_eval = if config.ablation.equal_weights { [1.0 / 3.0; 3] } else { weights.w };
        let val_metric = evaluate(&model, val_set, w_eval).map_err(&on_err)?;
        history.epochs.push(EpochRecord {
            epoch,
            loss_final: sum_final / n,
            loss_pers: sum_pers / n,
            loss_align: sum_align / n,
            val_metric,
            weights: weights.w,
            ref_losses,
        });
        log::debug!("epoch {epoch}: L_final {:.6} val {val_metric:.6} w {:?}", sum_final / n, weights.w);

        if let Some(patience) = config.patience {
            match best {
                Some((b, _)) if !metrics::is_better(task, val_metric, b) => {}
                _ => best = Some((val_metric, epoch)),
            }
            if let Some((_, at)) = best {
                if epoch - at >= patience {
                    break;
                }
            }
        }
    }
    Ok(TrainedModel {
        model,
        references: references.take(),
        weights,
        history,
    })
}

/// Training-set MSE (IPP) or accuracy (DOP) of a trained model.
pub fn training_metric(trained: &TrainedModel, clips: &[&FeatureClip]) -> Result<f64> {
    evaluate(&trained.model, clips, trained.inference_weights())
}
