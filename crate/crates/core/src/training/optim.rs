//! Adam and momentum SGD with cosine learning-rate decay and global
//! gradient-norm clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Momentum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Momentum for [`OptimizerKind::Momentum`].
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Decay the rate with a half cosine over the whole run.
    pub cosine: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: Some(5.0),
            cosine: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be non-negative", self.lr)));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("momentum", self.momentum)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("optimizer {k} = {v} is outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("optimizer eps must be positive and weight_decay non-negative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        Ok(())
    }

    /// Rate at `step` of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        let t = (step as f64 / total as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Optimizer moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<f32>>,
    /// Second moments (Adam only).
    pub second: BTreeMap<String, Tensor<f32>>,
}

/// L2 norm over every gradient entry.
pub fn global_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            ..Default::default()
        })
    }

    /// One update with rate from the cosine schedule over `total_steps`.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, total_steps: u64) -> Result<f64> {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => (c / norm) as f32,
            _ => 1.0,
        };
        let lr = self.config.lr_at(self.step, total_steps) as f32;
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - (c.beta1 as f32).powi(t);
        let bc2 = 1.0 - (c.beta2 as f32).powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown parameter `{name}`")))?;
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            match c.kind {
                OptimizerKind::Adam => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for (k, &gk) in g.data().iter().enumerate() {
                        let gk = gk * clip + c.weight_decay as f32 * pd[k];
                        md[k] = b1 * md[k] + (1.0 - b1) * gk;
                        vd[k] = b2 * vd[k] + (1.0 - b2) * gk * gk;
                        let mhat = md[k] / bc1;
                        let vhat = vd[k] / bc2;
                        pd[k] -= lr * mhat / (vhat.sqrt() + c.eps as f32);
                    }
                }
                OptimizerKind::Momentum => {
                    let (pd, md) = (p.data_mut(), m.data_mut());
                    for (k, &gk) in g.data().iter().enumerate() {
                        let gk = gk * clip + c.weight_decay as f32 * pd[k];
                        md[k] = c.momentum as f32 * md[k] + gk;
                        pd[k] -= lr * md[k];
                    }
                }
            }
        }
        Ok(norm)
    }
}
