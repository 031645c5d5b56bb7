//! Adam with bias correction and an L2 weight-decay term.

use alloc::vec::Vec;

use crate::autodiff::Gradients;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * theta`.
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| alloc::vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.param(id).data();
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] + self.weight_decay * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Mode, Tape};
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(alloc::vec![2.0, -3.0]).unwrap());
        let grads = {
            let mut tape = Tape::new(&store, Mode::Eval);
            let xv = tape.param(x);
            let sq = tape.mul(xv, xv).unwrap();
            let l = tape.sum_all(sq).unwrap();
            tape.backward(l).unwrap()
        };
        let mut adam = Adam::new(&store, 0.1, 0.0);
        adam.step(&mut store, &grads);
        let p = store.get(x).data();
        assert!((p[0] - 1.9).abs() < 1e-7);
        assert!((p[1] + 2.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(alloc::vec![5.0, -4.0, 1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.05, 0.0);
        for _ in 0..2000 {
            let grads = {
                let mut tape = Tape::new(&store, Mode::Eval);
                let xv = tape.param(x);
                let sq = tape.mul(xv, xv).unwrap();
                let l = tape.sum_all(sq).unwrap();
                tape.backward(l).unwrap()
            };
            adam.step(&mut store, &grads);
        }
        assert!(store.get(x).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn weight_decay_shrinks_with_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(alloc::vec![1.0]).unwrap());
        let grads = Gradients::zeros(&store);
        let mut adam = Adam::new(&store, 0.01, 1e-5);
        adam.step(&mut store, &grads);
        assert!(store.get(x).data()[0] < 1.0);
    }
}
