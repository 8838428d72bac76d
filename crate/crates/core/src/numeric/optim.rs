use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adaptive moments with decoupled weight decay. Decay applies to weight
/// tensors only (not biases or layer-norm affines).
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    config: AdamWConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros = || store.tensors().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`; `grads[i]` pairs with parameter `i`.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>], lr: f64) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let bc1 = F::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = F::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr_f = F::lit(lr);
        let eps = F::lit(c.eps);
        let decay = F::lit(lr * c.weight_decay);
        for (i, param) in store.params_mut().iter_mut().enumerate() {
            let decays = param.kind.decays();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in param.tensor.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                if decays {
                    *p -= decay * *p;
                }
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
