//! AdamW with cosine learning-rate annealing.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub lr_min: f64,
    /// Number of optimizer updates the cosine schedule spans.
    pub total_steps: u64,
    pub accumulation_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            base_lr: 1e-4,
            lr_min: 0.0,
            total_steps: 1,
            accumulation_steps: 4,
        }
    }
}

/// `lr_min + (base - lr_min) * (1 + cos(pi * t / T)) / 2`, clamped to
/// `lr_min` once `t` passes `T`.
pub fn cosine_lr(base_lr: f64, lr_min: f64, t: u64, total_steps: u64) -> f64 {
    if total_steps == 0 || t >= total_steps {
        return lr_min;
    }
    let progress = t as f64 / total_steps as f64;
    lr_min + 0.5 * (base_lr - lr_min) * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Per-parameter AdamW moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: AdamWConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if config.accumulation_steps == 0 {
            return Err(Error::Config("accumulation_steps must be at least 1".into()));
        }
        if !config.base_lr.is_finite() || config.base_lr <= 0.0 || config.lr_min < 0.0 {
            return Err(Error::Config(format!(
                "learning rates must satisfy base_lr > 0 and lr_min >= 0 (got {}, {})",
                config.base_lr, config.lr_min
            )));
        }
        Ok(Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Learning rate the next update will use.
    pub fn cosine_lr(&self) -> f64 {
        cosine_lr(
            self.config.base_lr,
            self.config.lr_min,
            self.t,
            self.config.total_steps,
        )
    }

    /// One AdamW update from gradients summed over a single backward pass.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut DenseArray)>,
    {
        self.step_accumulated(params, 1)
    }

    /// One AdamW update from gradients summed over `micro_batches` backward
    /// passes; the sum is divided by `micro_batches` so the update matches a
    /// single large batch. Gradients are cleared afterwards.
    pub fn step_accumulated<'a, I>(&mut self, params: I, micro_batches: usize) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut DenseArray)>,
    {
        let mut trainable: Vec<(String, &'a mut DenseArray)> = params
            .into_iter()
            .filter(|(_, p)| p.requires_grad())
            .collect();
        if let Some((name, _)) = trainable.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        let lr = self.cosine_lr();
        self.t += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        let norm = 1.0 / micro_batches.max(1) as f64;

        for (name, param) in trainable.iter_mut() {
            let grad = param.take_grad().expect("checked above");
            let moments = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            if moments.m.len() != grad.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: vec![moments.m.len()],
                    rhs: param.shape().to_vec(),
                });
            }
            let values = param.values_mut();
            for (((theta, g), m), v) in values
                .iter_mut()
                .zip(&grad)
                .zip(moments.m.iter_mut())
                .zip(moments.v.iter_mut())
            {
                let g = *g as f64 * norm;
                let m_new = c.beta1 * *m as f64 + (1.0 - c.beta1) * g;
                let v_new = c.beta2 * *v as f64 + (1.0 - c.beta2) * g * g;
                *m = m_new as f32;
                *v = v_new as f32;
                let m_hat = m_new / bias1;
                let v_hat = v_new / bias2;
                let th = *theta as f64;
                let updated = th - lr * c.weight_decay * th - lr * m_hat / (v_hat.sqrt() + c.eps);
                *theta = updated as f32;
            }
        }
        Ok(())
    }
}
