use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Steps taken so far.
    pub t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Adam {
            cfg,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// Update every parameter that has a gradient. `grads` is indexed by
    /// parameter id.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId::from_index(i);
            if !store.is_trainable(id) {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in p
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Moment tensors as named pairs, for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            let name = store.name(ParamId::from_index(i));
            if let (Some(m), Some(v)) = (m, v) {
                out.push((format!("optim.m.{name}"), m.clone()));
                out.push((format!("optim.v.{name}"), v.clone()));
            }
        }
        out
    }

    pub fn import(cfg: AdamConfig, t: u64, store: &ParamStore, extras: &[(String, Tensor)]) -> Self {
        let mut adam = Adam::new(cfg, store.len());
        adam.t = t;
        for (name, tensor) in extras {
            let (slot, pname) = if let Some(p) = name.strip_prefix("optim.m.") {
                (&mut adam.m, p)
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                (&mut adam.v, p)
            } else {
                continue;
            };
            if let Some(id) = store.find(pname) {
                slot[id.index()] = Some(tensor.clone());
            }
        }
        adam
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
