//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{HeroError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    /// Pre-training values: lr 3e-5, weight decay 0.01.
    fn default() -> Self {
        Self {
            lr: 3e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(HeroError::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(HeroError::Config("weight decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(HeroError::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Optimizer state: first/second moments and an update count per parameter,
/// plus the number of `step` calls.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let m = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            config,
            step: 0,
            m,
            v,
            t: vec![0; params.len()],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Number of updates each parameter has received.
    pub fn update_counts(&self) -> &[u64] {
        &self.t
    }

    /// Restores state saved by [`AdamW::moments`], [`AdamW::update_counts`]
    /// and [`AdamW::step_count`].
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>, t: Vec<u64>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() || t.len() != self.t.len() {
            return Err(HeroError::Checkpoint("optimizer state does not match parameters".into()));
        }
        for (a, b) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            if a.shape() != b.shape() {
                return Err(HeroError::Checkpoint(format!(
                    "optimizer moment shape {:?} vs parameter {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    /// One update. Parameters absent from `grads` (not reached by the loss)
    /// are left untouched: no decay, no moment update.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(grad) = grads.get(id) else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                p[j] -= c.lr * c.weight_decay * p[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
