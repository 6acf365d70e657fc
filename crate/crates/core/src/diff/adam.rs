use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Update steps after which the learning rate is multiplied by `decay`.
    pub milestones: Vec<u64>,
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            milestones: vec![200_000],
            decay: 0.5,
        }
    }
}

impl AdamConfig {
    /// Learning rate used by update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step > m).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

/// Adam with bias correction over every trainable parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.grad.len()]).collect();
        Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the current gradients and returns the lr used.
    pub fn step(&mut self, params: &mut ParamSet) -> f64 {
        self.step += 1;
        let lr = self.config.lr_at(self.step);
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.step.min(i32::MAX as u64) as i32);
        for (k, p) in params.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        lr
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state_tensors(&self, params: &ParamSet) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, (_, p)) in params.iter().enumerate() {
            let shape = p.value.shape();
            out.push((format!("adam.m.{}", p.name), Tensor::new(shape, self.first[k].clone()).expect("shape")));
            out.push((format!("adam.v.{}", p.name), Tensor::new(shape, self.second[k].clone()).expect("shape")));
        }
        out
    }

    /// Restores moments and step counter saved by [`Adam::state_tensors`].
    pub fn restore(&mut self, params: &ParamSet, step: u64, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (k, (_, p)) in params.iter().enumerate() {
            for (prefix, buf) in [("adam.m.", &mut self.first[k]), ("adam.v.", &mut self.second[k])] {
                let name = format!("{prefix}{}", p.name);
                let t = lookup(&name).ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")))?;
                if t.data().len() != buf.len() {
                    return Err(Error::Data(format!("{name} has wrong size")));
                }
                buf.copy_from_slice(t.data());
            }
        }
        self.step = step;
        Ok(())
    }
}
