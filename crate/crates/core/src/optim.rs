//! SGD with momentum and a cosine learning-rate schedule.

use alloc::vec::Vec;

use num_traits::Float;

use crate::param::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// `0.5·base·(1 + cos(π·step/total))`; `step` is clamped to `[0, total]`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * base_lr * (1.0 + Float::cos(core::f64::consts::PI * s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Heavy-ball SGD: `v ← μv + (g + λw)`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    /// Update every trainable weight of `store` from its accumulated gradient.
    /// Frozen stores and buffers are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        if store.is_frozen() {
            return;
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        let lr = T::of(lr);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.kind(id) != ParamKind::Weight {
                continue;
            }
            let (w, g) = store.value_and_grad_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(w.shape()));
            for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v + g + wd * *w;
                *w = *w - lr * *v;
            }
        }
    }

    /// Momentum buffers in store order, zero for never-updated weights.
    pub fn velocities(&self) -> &[Option<Tensor<T>>] {
        &self.velocity
    }

    pub fn set_velocities(&mut self, velocity: Vec<Option<Tensor<T>>>) {
        self.velocity = velocity;
    }
}
