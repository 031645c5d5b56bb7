//! Unimodal reference models and the modality weights derived from their
//! validation losses.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::data::Modality;
use crate::encoder::D_MODEL;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// FC16+ReLU, FC8+ReLU, FC1+sigmoid on one modality's latent embedding.
/// Owns its parameters, separate from the fusion model's.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    pub modality: Modality,
    pub params: ParamStore,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub dropout: f64,
}

impl ReferenceModel {
    pub fn new<R: Rng + ?Sized>(modality: Modality, dropout: f64, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let p = |s: &str| format!("ref.{}.{s}", modality.short());
        let fc1 = Linear::new(&mut params, &p("fc1"), D_MODEL, 16, Init::FanIn, rng);
        let fc2 = Linear::new(&mut params, &p("fc2"), 16, 8, Init::FanIn, rng);
        let fc3 = Linear::new(&mut params, &p("fc3"), 8, 1, Init::FanIn, rng);
        ReferenceModel {
            modality,
            params,
            fc1,
            fc2,
            fc3,
            dropout,
        }
    }

    /// `[B, 16] -> [B, 1]` in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape<'_>, latent: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, latent)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, self.dropout)?;
        let h = self.fc2.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = self.fc3.forward(tape, h)?;
        tape.sigmoid(h)
    }

    /// Eval-mode predictions for a `[N, 16]` latent matrix.
    pub fn predict(&self, latents: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let x = tape.input(latents.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// One pass of MSE minibatch updates over `(latents, targets)`.
    pub fn fit_epoch<R: Rng + ?Sized>(
        &mut self,
        adam: &mut Adam,
        latents: &Tensor,
        targets: &[f64],
        batch_size: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let n = targets.len();
        if n == 0 || latents.rows() != n {
            return Err(Error::invalid("reference training set is empty or misaligned"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size.max(1)) {
            let x = gather_rows(latents, chunk);
            let y = Tensor::new(&[chunk.len(), 1], chunk.iter().map(|&i| targets[i]).collect())?;
            let seed: u64 = rng.random();
            let grads = {
                let mut tape = Tape::with_seed(&self.params, Mode::Train, seed);
                let xv = tape.input(x);
                let yv = tape.input(y);
                let pred = self.forward(&mut tape, xv)?;
                let loss = mse_node(&mut tape, pred, yv)?;
                total += tape.item(loss) * chunk.len() as f64;
                tape.backward(loss)?
            };
            adam.step(&mut self.params, &grads);
        }
        Ok(total / n as f64)
    }
}

pub(crate) fn gather_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(&[rows.len(), c], data).expect("non-empty gather")
}

pub(crate) fn mse_node(tape: &mut Tape<'_>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Validation MSE of a reference model.
pub fn reference_loss(model: &ReferenceModel, latents: &Tensor, targets: &[f64]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = model.predict(latents)?;
    if pred.len() != targets.len() {
        return Err(Error::shape("reference_loss", format!("{} predictions for {} targets", pred.len(), targets.len())));
    }
    Ok(pred.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / targets.len() as f64)
}

/// `softmax(-beta * losses)` with max-subtraction.
pub fn compute_target_weights(losses: [f64; 3], beta: f64) -> [f64; 3] {
    let logits = losses.map(|l| -beta * l);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| libm::exp(z - max));
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// `alpha * w + (1 - alpha) * target`, elementwise.
pub fn update_weights(w: [f64; 3], target: [f64; 3], alpha: f64) -> [f64; 3] {
    core::array::from_fn(|i| alpha * w[i] + (1.0 - alpha) * target[i])
}

/// Modality weights `(w_A, w_V, w_L)` and their update rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityWeights {
    pub w: [f64; 3],
    pub alpha: f64,
    pub beta: f64,
    pub last_ref_losses: Option<[f64; 3]>,
}

impl ModalityWeights {
    pub fn new(alpha: f64, beta: f64) -> Self {
        ModalityWeights {
            w: [1.0 / 3.0; 3],
            alpha,
            beta,
            last_ref_losses: None,
        }
    }

    pub fn get(&self, m: Modality) -> f64 {
        self.w[m.index()]
    }

    /// Moves `w` toward the softmax target of `losses`; returns the target.
    pub fn update(&mut self, losses: [f64; 3]) -> [f64; 3] {
        let target = compute_target_weights(losses, self.beta);
        self.w = update_weights(self.w, target, self.alpha);
        self.last_ref_losses = Some(losses);
        target
    }
}

/// `w_A H_A ++ w_V H_V ++ w_L H_L`, `[B, 48]`.
pub fn weighted_concat(tape: &mut Tape<'_>, latents: &[Var; 3], w: [f64; 3]) -> Result<Var> {
    let parts = [
        tape.scale(latents[0], w[0])?,
        tape.scale(latents[1], w[1])?,
        tape.scale(latents[2], w[2])?,
    ];
    tape.concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(m: &mut ReferenceModel) {
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            let s = m.params.get(id).shape().to_vec();
            *m.params.get_mut(id) = Tensor::zeros(&s);
        }
    }

    #[test]
    fn zero_reference_predicts_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ReferenceModel::new(Modality::Visual, 0.4, &mut rng);
        zeroed(&mut m);
        let p = m.predict(&Tensor::full(&[3, 16], 7.0)).unwrap();
        assert_eq!(p, [0.5; 3]);
        let l = reference_loss(&m, &Tensor::zeros(&[4, 16]), &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
    }

    #[test]
    fn saturates_on_large_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ReferenceModel::new(Modality::Acoustic, 0.0, &mut rng);
        zeroed(&mut m);
        *m.params.get_mut(m.fc3.bias) = Tensor::vector(vec![40.0]).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 16])).unwrap()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn reference_loss_single_sample_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ReferenceModel::new(Modality::Language, 0.0, &mut rng);
        zeroed(&mut m);
        // sigmoid(b) = 0.3
        let b = libm::log(0.3 / 0.7);
        *m.params.get_mut(m.fc3.bias) = Tensor::vector(vec![b]).unwrap();
        let l = reference_loss(&m, &Tensor::zeros(&[1, 16]), &[0.5]).unwrap();
        assert!((l - 0.04).abs() < 1e-12);
        assert_eq!(reference_loss(&m, &Tensor::zeros(&[1, 16]), &[]), Err(Error::EmptyDataset));
    }

    #[test]
    fn target_weight_examples() {
        assert_eq!(compute_target_weights([0.2; 3], 50.0), [1.0 / 3.0; 3]);
        let w = compute_target_weights([0.01, 0.02, 0.03], 50.0);
        // independent evaluation without max-subtraction
        let e: Vec<f64> = [0.01, 0.02, 0.03].iter().map(|l: &f64| (-50.0 * l).exp()).collect();
        let s: f64 = e.iter().sum();
        for i in 0..3 {
            assert!((w[i] - e[i] / s).abs() < 1e-15);
        }
        assert!((w[0] - 0.5065).abs() < 5e-4 && (w[1] - 0.3072).abs() < 5e-4 && (w[2] - 0.1863).abs() < 5e-4);
        let tiny = compute_target_weights([0.0, 5.0, 100.0], 1e-12);
        assert!(tiny.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-9));
        // huge logits stay finite
        let big = compute_target_weights([0.0, 1e6, 2e6], 50.0);
        assert_eq!(big, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn update_examples() {
        let w = update_weights([1.0 / 3.0; 3], [0.5, 0.3, 0.2], 0.5);
        let oracle = [0.416_666_666_666_666_7, 0.316_666_666_666_666_7, 0.266_666_666_666_666_7];
        for i in 0..3 {
            assert!((w[i] - oracle[i]).abs() < 1e-12);
        }
        let same = update_weights([0.2, 0.3, 0.5], [0.2, 0.3, 0.5], 0.5);
        for (a, b) in same.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(update_weights([0.2, 0.3, 0.5], [1.0, 0.0, 0.0], 1.0), [0.2, 0.3, 0.5]);
    }

    #[test]
    fn weighted_concat_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval);
        let ones = tape.input(Tensor::full(&[1, 16], 1.0));
        let h = weighted_concat(&mut tape, &[ones, ones, ones], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(tape.shape(h), &[1, 48]);
        assert!(tape.value(h).data()[..16].iter().all(|&v| v == 1.0));
        assert!(tape.value(h).data()[16..].iter().all(|&v| v == 0.0));
        let h = weighted_concat(&mut tape, &[ones, ones, ones], [1.0 / 3.0; 3]).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn fitting_lowers_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = ReferenceModel::new(Modality::Acoustic, 0.0, &mut rng);
        let x = crate::params::uniform(&mut rng, &[20, 16], 1.0);
        let y: Vec<f64> = (0..20).map(|i| if x.row(i)[0] > 0.0 { 0.9 } else { 0.1 }).collect();
        let before = reference_loss(&m, &x, &y).unwrap();
        let mut adam = Adam::new(&m.params, 0.01, 0.0);
        for _ in 0..200 {
            m.fit_epoch(&mut adam, &x, &y, 8, &mut rng).unwrap();
        }
        assert!(reference_loss(&m, &x, &y).unwrap() < before * 0.5);
    }
}
