use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warm-up from peak/25 to peak over the first 30% of steps,
    /// then cosine back down to peak/25.
    OneCycle,
    /// `½(1 + cos(π·step/total))·base`.
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub label_smoothing: f64,
    /// Focal loss is used for the task term when this is positive.
    pub focal_gamma: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            schedule: Schedule::OneCycle,
            epochs: 20,
            early_stop_patience: 5,
            label_smoothing: 0.05,
            focal_gamma: 0.0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.early_stop_patience < 1 {
            return Err(Error::InvalidConfig("early_stop_patience must be ≥ 1".into()));
        }
        if !(0.0..=0.2).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig(format!("label_smoothing must lie in [0, 0.2], got {}", self.label_smoothing)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::InvalidConfig("focal_gamma must be ≥ 0".into()));
        }
        Ok(())
    }
}

pub fn lr_schedule(kind: Schedule, step: usize, total_steps: usize, base_lr: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let step = (step as f64).min(total);
    match kind {
        Schedule::Constant => base_lr,
        Schedule::Cosine => 0.5 * (1.0 + (PI * step / total).cos()) * base_lr,
        Schedule::OneCycle => {
            let low = base_lr / 25.0;
            let warm = 0.3 * total;
            if step <= warm {
                low + (base_lr - low) * step / warm
            } else {
                let t = (step - warm) / (total - warm);
                low + (base_lr - low) * 0.5 * (1.0 + (PI * t).cos())
            }
        }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
/// Parameters with no gradient entry are left untouched.
pub fn adamw_step(params: &mut ParamStore, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
    params.step += 1;
    let t = params.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.param(name) else { continue };
        if g.shape() != p.value.shape() {
            return Err(Error::shape(format!("gradient for `{name}` has shape {:?}", g.shape())));
        }
        let decay = (1.0 - lr * weight_decay) as f32;
        let value = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for i in 0..value.len() {
            let gi = g.data()[i] as f64;
            let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            value[i] = (value[i] * decay) - update as f32;
        }
    }
    Ok(())
}
