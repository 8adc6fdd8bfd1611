//! AdamW with decoupled weight decay and a per-epoch cosine schedule.

use std::collections::HashMap;

use thiserror::Error;

use crate::ParamStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` is frozen")]
    Frozen(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Cosine annealing from `base` at epoch 0 to 0 at epoch `horizon`.
pub fn cosine_lr(base: f64, epoch: usize, horizon: usize) -> f64 {
    let t = (epoch.min(horizon) as f64) / horizon.max(1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub base_lr: f64,
    pub horizon_epochs: usize,
    step: u64,
    epoch: usize,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, base_lr: f64, horizon_epochs: usize) -> Self {
        Self {
            config,
            base_lr,
            horizon_epochs,
            step: 0,
            epoch: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// Learning rate for the current epoch.
    pub fn lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.epoch, self.horizon_epochs)
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    /// One AdamW update of the named parameters using their `grad` buffers.
    ///
    /// Every name must be trainable and carry a gradient; nothing is modified
    /// unless all of them do.
    pub fn step(&mut self, store: &mut ParamStore, names: &[String]) -> Result<(), OptimizerError> {
        for name in names {
            let t = store
                .get(name)
                .ok_or_else(|| OptimizerError::UnknownParam(name.clone()))?;
            if !t.requires_grad {
                return Err(OptimizerError::Frozen(name.clone()));
            }
            if t.grad.is_none() {
                return Err(OptimizerError::MissingGrad(name.clone()));
            }
        }

        self.step += 1;
        let lr = self.lr();
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for name in names {
            let decay = matches!(
                store.kind(name),
                Some(crate::ParamKind::Trainable { decay: true })
            );
            let t = store.get_mut(name).expect("checked above");
            let grad = t.grad.take().expect("checked above");
            let n = grad.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = t.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                if decay {
                    data[i] -= lr * weight_decay * data[i];
                }
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}
