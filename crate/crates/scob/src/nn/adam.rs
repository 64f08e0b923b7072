//! Adaptive-moment optimizer: per-parameter first/second moment scaling
//! with bias correction.

use crate::error::{Result, ScobError};

use super::param::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// One optimizer step on a parameter.
pub fn adam_step(param: &mut Param, grad: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
    if grad.len() != param.values.len() {
        return Err(ScobError::Contract(format!(
            "adam_step: gradient length {} vs parameter length {}",
            grad.len(),
            param.values.len()
        )));
    }
    param.steps += 1;
    let t = param.steps as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grad.len() {
        let g = grad[i];
        param.m[i] = cfg.beta1 * param.m[i] + (1.0 - cfg.beta1) * g;
        param.v[i] = cfg.beta2 * param.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = param.m[i] / bc1;
        let vhat = param.v[i] / bc2;
        param.values[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Raw slice variant used by the label estimator, whose rows keep their
/// own moment buffers and step counters.
pub fn adam_step_slice(
    values: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    steps: u64,
    grad: &[f64],
    lr: f64,
    cfg: &AdamConfig,
) {
    let t = steps as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grad.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        values[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}
