//! AdamW with decoupled weight decay and a reduce-on-plateau schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step: u64,
    /// Steps rejected because a gradient held a NaN or infinity.
    pub skipped: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        AdamW {
            config,
            step: 0,
            skipped: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. Returns `false`
    /// and leaves everything untouched when any gradient is non-finite.
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
        weight_decay: f64,
    ) -> bool {
        if grads.values().any(|g| !g.all_finite()) {
            self.skipped += 1;
            tracing::warn!(step = self.step, "non-finite gradient, step skipped");
            return false;
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi as f64;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                let mut x = *w as f64;
                x -= lr * weight_decay * x;
                x -= lr * mhat / (vhat.sqrt() + eps);
                *w = x as f32;
            }
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-7,
        }
    }
}

/// Multiplies the rate by `factor` once the monitored value has gone
/// `patience` epochs without a strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub config: SchedulerConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: SchedulerConfig) -> Self {
        PlateauScheduler {
            config,
            lr: lr.max(config.min_lr),
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> f64 {
        let improved = value.is_finite() && self.best.is_none_or(|b| value < b);
        if improved {
            self.best = Some(value);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
