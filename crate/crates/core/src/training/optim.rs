use alloc::format;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, FROZEN_TENSORS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments shaped like the parameters, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// AdamW on one flat tensor. `step` is the 1-based step after incrementing.
pub fn adamw_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, cfg: &AdamWConfig) {
    let bc1 = 1.0 - libm::pow(cfg.beta1, step as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, step as f64);
    for i in 0..param.len() {
        param[i] *= 1.0 - lr * cfg.weight_decay;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
    }
}

/// One AdamW step over every trainable tensor. Frozen tensors are neither
/// updated nor decayed. Gradients are checked before anything is modified.
pub fn adamw_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let names: alloc::vec::Vec<_> = params.tensors().into_iter().map(|(n, t)| (n, t.shape())).collect();
    if names.len() != grad_tensors.len() {
        return Err(Error::shape("adamw_step", format!("{} tensors", names.len()), format!("{}", grad_tensors.len())));
    }
    for ((name, shape), (gname, g)) in names.iter().zip(&grad_tensors) {
        if name != gname || *shape != g.shape() {
            return Err(Error::shape("adamw_step", format!("{name} {shape:?}"), format!("{gname} {:?}", g.shape())));
        }
        if let Some(i) = g.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at index {i}")));
        }
    }
    state.step += 1;
    let step = state.step;
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (i, (name, p)) in params.tensors_mut().into_iter().enumerate() {
        if FROZEN_TENSORS.contains(&name.as_str()) {
            continue;
        }
        adamw_update(
            p.as_mut_slice(),
            grad_tensors[i].1.as_slice(),
            ms[i].1.as_mut_slice(),
            vs[i].1.as_mut_slice(),
            step,
            lr,
            cfg,
        );
    }
    Ok(())
}

/// One-cycle learning rate: linear warm-up from `max_lr/25` to `max_lr` over
/// the first 30% of steps, then cosine anneal down to `max_lr/1e4`.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::InvalidInput(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let start = max_lr / 25.0;
    let end = max_lr / 1e4;
    let warm = (0.3 * total_steps as f64) as usize;
    if step < warm {
        return Ok(start + (max_lr - start) * step as f64 / warm as f64);
    }
    let span = total_steps - 1 - warm;
    if span == 0 {
        return Ok(max_lr);
    }
    let progress = (step - warm) as f64 / span as f64;
    Ok(end + (max_lr - end) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}
