use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    /// Learning-rate multiplier for `encoder.*` parameters.
    pub encoder_lr_mult: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            min_lr_ratio: 0.0,
            encoder_lr_mult: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    /// Linear warmup then cosine decay over `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn lr_mult(&self, name: &str) -> f64 {
        if name.starts_with("encoder.") {
            self.encoder_lr_mult
        } else {
            1.0
        }
    }
}

/// Whether decoupled weight decay applies: weight matrices only, not norms,
/// biases, gains, embeddings or learned tokens.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && name.ends_with(".w")
}

/// AdamW moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, cfg: &OptimConfig, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (ob1, ob2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let step_lr = lr * cfg.lr_mult(name);
            let alpha = T::lit(step_lr / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let eps = T::lit(cfg.eps);
            let shrink = if decays(name, &shape) {
                T::lit(1.0 - step_lr * cfg.weight_decay)
            } else {
                T::one()
            };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *pi = *pi * shrink - alpha * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Scale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}
