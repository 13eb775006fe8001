use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with per-parameter step counters.
///
/// A parameter that received no gradient in a step (not reached by backpropagation) is
/// skipped entirely, so its moments and step counter stay untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|p| Tensor::zeros(store.value(p).shape()))
            .collect();
        Adam {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for p in store.ids().collect::<Vec<_>>() {
            if !store.touched(p) {
                continue;
            }
            let i = p.0;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let grad = store.grad(p).clone();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.value_mut(p).data_mut();
            for j in 0..w.len() {
                let g = grad.data()[j] + weight_decay * w[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                w[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// True when no moment entry of the parameter has ever been written.
    pub fn is_fresh(&self, index: usize) -> bool {
        self.steps[index] == 0
            && self.first[index].data().iter().all(|&x| x == 0.0)
            && self.second[index].data().iter().all(|&x| x == 0.0)
    }
}
