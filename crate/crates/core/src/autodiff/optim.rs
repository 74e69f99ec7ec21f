//! Adam with coupled L2 weight decay and a reduce-on-plateau schedule.

use super::tensor::Tensor;
use crate::error::{input_err, shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(input_err!("learning rate must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(input_err!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(input_err!("eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

/// Optimizer state: first/second moments per parameter tensor and the step
/// counter.
///
/// With `f32_storage` set, moments and updated parameters are rounded to
/// `f32` after every step so that a 32-bit checkpoint captures the state
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub f32_storage: bool,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            f32_storage: true,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update of `params` from `grads`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.numel() != g.len() || p.numel() != m.len() {
                return Err(shape_err!("adam: parameter/gradient size mismatch"));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let round = |x: f64| if self.f32_storage { x as f32 as f64 } else { x };
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let grad = gi + weight_decay * *pi;
                *mi = round(beta1 * *mi + (1.0 - beta1) * grad);
                *vi = round(beta2 * *vi + (1.0 - beta2) * grad * grad);
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi = round(*pi - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// strictly improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub stale_epochs: usize,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self::new(0.1, 5).expect("valid defaults")
    }
}

impl PlateauSchedule {
    pub fn new(factor: f64, patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) || patience == 0 {
            return Err(input_err!("plateau factor must be in (0, 1) and patience >= 1"));
        }
        Ok(Self {
            factor,
            patience,
            best: f64::INFINITY,
            stale_epochs: 0,
        })
    }

    /// Feeds one validation loss and returns the learning rate to use next.
    pub fn update(&mut self, val_loss: f64, lr: f64) -> Result<f64> {
        if !val_loss.is_finite() {
            return Err(input_err!("validation loss must be finite, got {val_loss}"));
        }
        if val_loss < self.best {
            self.best = val_loss;
            self.stale_epochs = 0;
            return Ok(lr);
        }
        self.stale_epochs += 1;
        if self.stale_epochs >= self.patience {
            self.stale_epochs = 0;
            return Ok(lr * self.factor);
        }
        Ok(lr)
    }
}
