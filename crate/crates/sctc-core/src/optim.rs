//! Decoupled-weight-decay adaptive optimizer with a cosine-annealed step size.

use crate::error::{Error, Result};
use crate::tape::ParamStore;

/// Per-parameter moment buffers plus the shared schedule.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Schedule horizon in epochs; the step size reaches 0 at `epoch == horizon`.
    pub horizon: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, base_lr: f64, weight_decay: f64, horizon: usize) -> Self {
        let first_moment = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        let second_moment = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        Self {
            base_lr,
            weight_decay,
            horizon,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    /// Cosine-annealed step size: base * 0.5 * (1 + cos(pi * epoch / horizon)).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.horizon == 0 {
            return self.base_lr;
        }
        let t = (epoch as f64 / self.horizon as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// One update over every trainable parameter using the store's
    /// accumulated gradients. Errors if a trainable parameter has none.
    pub fn step(&mut self, store: &mut ParamStore, epoch: usize) -> Result<()> {
        for (id, p) in store.iter() {
            if p.trainable && store.grad(id).is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let lr = self.lr_at(epoch);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let grad = store.grad(id).unwrap().to_vec();
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let value = &mut store.value_mut(id).data;
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                // decoupled decay: applied to the weight, not the gradient
                value[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * value[i]);
            }
        }
        Ok(())
    }
}
