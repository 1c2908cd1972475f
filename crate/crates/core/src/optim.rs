//! Adam with an additive L2 term, and step learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coefficient of the L2 term `weight_decay * param` added to the gradient.
    pub weight_decay: f64,
    step: u64,
    lr_scale: Vec<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .values()
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            lr_scale: vec![1.0; params.len()],
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Multiplies the learning rate of the parameters whose name starts
    /// with `prefix`.
    pub fn scale_lr(&mut self, params: &ParamStore, prefix: &str, factor: f64) {
        for (s, name) in self.lr_scale.iter_mut().zip(params.names()) {
            if name.starts_with(prefix) {
                *s = factor;
            }
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Non-finite gradients abort the update
    /// before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of parameter '{}'", params.names()[i]),
                    detail: format!("element {pos} = {}", g.data()[pos]),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        for ((((p, g), m), v), scale) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(&self.lr_scale)
        {
            let lr = lr * scale;
            let pd = p.data_mut();
            for k in 0..pd.len() {
                let gk = g.data()[k] + wd * pd[k];
                let mk = b1 * m.data()[k] + (1.0 - b1) * gk;
                let vk = b2 * v.data()[k] + (1.0 - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let mhat = mk / bc1;
                let vhat = vk / bc2;
                pd[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step decay of the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Halve every 400 epochs.
    Synthetic,
    /// Multiply by 0.33 every 100 epochs.
    Classification,
    Constant,
}

impl LrSchedule {
    pub fn lr(self, epoch: usize, base_lr: f64) -> f64 {
        match self {
            LrSchedule::Synthetic => base_lr * 0.5f64.powi((epoch / 400) as i32),
            LrSchedule::Classification => base_lr * 0.33f64.powi((epoch / 100) as i32),
            LrSchedule::Constant => base_lr,
        }
    }
}
