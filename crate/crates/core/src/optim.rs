//! First-order optimizers over network parameter blocks.

use serde::{Deserialize, Serialize};
use viewlab_autodiff::{Gradients, Tensor, Var};

use crate::error::{Error, Result};
use crate::modelzoo::Param;

/// Gradient of each bound parameter block (zeros where unreached).
pub fn param_grads(grads: &Gradients, vars: &[Var<'_>]) -> Vec<Tensor> {
    vars.iter().map(|v| grads.wrt(*v)).collect()
}

fn check_grads(params: &[Param], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::config(format!(
            "{} parameter blocks but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter block {}", params[i].name),
                index: j,
            });
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay added to the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    /// Applies one update at learning rate `lr`; frozen blocks are left untouched.
    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if !p.learnable {
                continue;
            }
            for ((w, &gi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gi + weight_decay * *w;
                *vi = momentum * *vi + d;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if !p.learnable {
                continue;
            }
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `base * (1 + cos(pi * step / total)) / 2`; steps past the end give 0.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    if step > total_steps {
        log::warn!("learning-rate step {step} past the schedule end {total_steps}; using 0");
        return 0.0;
    }
    if step == total_steps {
        return 0.0;
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}
