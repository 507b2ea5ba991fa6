use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::tape::ParamStore;
use crate::tensor::Matrix;

/// Adam with optional decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay rate; zero gives plain Adam.
    #[serde(default)]
    pub weight_decay: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: store.zero_grads(),
            second: store.zero_grads(),
        }
    }

    /// Applies one update. `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        self.step += 1;
        let bias1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bias2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for ((param, grad), (m, v)) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (p, g) = (param.data_mut(), grad.data());
            let (m, v) = (m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                p[k] -= self.learning_rate * (m_hat / (crate::math::sqrt(v_hat) + self.eps) + self.weight_decay * p[k]);
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) {
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum();
    let norm = crate::math::sqrt(sq);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
}
