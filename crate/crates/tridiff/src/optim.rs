//! AdamW with decoupled weight decay and a warmup + cosine-annealing
//! learning-rate schedule.

use crate::denoiser::ParamMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 1000,
            total_steps: 10_000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.base_lr <= 0.0 {
            return Err(OptimError::Config("base_lr must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(OptimError::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear ramp 0 → base_lr over the warmup, then cosine annealing to 0 at
/// `total_steps`. Continuous at the warmup boundary.
pub fn lr_at(step: u64, opt: &OptimizerConfig) -> f64 {
    let step = step.min(opt.total_steps);
    if opt.warmup_steps > 0 && step < opt.warmup_steps {
        return opt.base_lr * step as f64 / opt.warmup_steps as f64;
    }
    let progress = (step - opt.warmup_steps) as f64 / (opt.total_steps - opt.warmup_steps) as f64;
    opt.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First/second moment accumulators, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamMap,
    pub v: ParamMap,
}

impl AdamState {
    pub fn new(params: &ParamMap) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update at optimizer step `step` (1-based): decoupled decay
/// (parameters scaled by 1 - lr·λ before the moment update), bias-corrected
/// moments, update -lr·m̂/(√v̂ + ε).
pub fn adamw_step(
    params: &mut ParamMap,
    grads: &ParamMap,
    state: &mut AdamState,
    opt: &OptimizerConfig,
    step: u64,
) -> Result<(), OptimError> {
    assert!(step >= 1, "optimizer steps are 1-based");
    let lr = lr_at(step, opt);
    let bc1 = 1.0 - opt.beta1.powi(step as i32);
    let bc2 = 1.0 - opt.beta2.powi(step as i32);
    for name in grads.names() {
        let g = grads.get(name);
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGradient(name.to_string()));
        }
        let g = g.data().to_vec();
        let m = state.m.get_mut(name).data_mut();
        let v = state.v.get_mut(name).data_mut();
        let w = params.get_mut(name).data_mut();
        for i in 0..w.len() {
            w[i] *= 1.0 - lr * opt.weight_decay;
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + opt.epsilon);
        }
    }
    Ok(())
}
