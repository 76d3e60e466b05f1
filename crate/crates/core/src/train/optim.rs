use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::{sc, Scalar};

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, constant afterwards.
pub fn lr_schedule(step: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

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

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let (b1, b2): (T, T) = (sc(c.beta1), sc(c.beta2));
        let bc1: T = sc(1.0 - c.beta1.powi(self.step as i32));
        let bc2: T = sc(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps, wd): (T, T, T) = (sc(lr), sc(c.eps), sc(c.weight_decay));
        for ((p, m), v) in store.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad.clone() else { continue };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
    }
}
