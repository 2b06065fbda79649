//! Adam optimizer with bias correction.

use super::store::ParamStore;
use super::{AutogradError, Result};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero-initialized moments shaped like the store's trainable entries.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, entry) in store.entries() {
            let len = if entry.trainable { entry.values.len() } else { 0 };
            m.push(vec![0.0; len]);
            v.push(vec![0.0; len]);
        }
        Self { lr, beta1: DEFAULT_BETA1, beta2: DEFAULT_BETA2, eps: DEFAULT_EPS, t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update over every trainable parameter, consuming the
    /// gradients currently accumulated in the store.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> =
            store.entries().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect();
        for id in ids {
            for g in store.grad(id) {
                if !g.is_finite() {
                    return Err(AutogradError::NonFiniteGradient(format!("param {}", id.0)));
                }
            }
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            // Split borrows: read grads via raw copy of the slice bounds.
            let grads: Vec<f64> = store.grad(id).to_vec();
            let values = store.values_mut(id);
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
