//! AdamW with decoupled weight decay and the polynomial learning-rate decay.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor for the decayed learning rate; keeps the last steps non-zero.
pub const MIN_LR: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments for each parameter plus the update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimizerState {
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Applies one AdamW update. `lrs` holds one learning rate per parameter so
/// that parameter groups can decay at different rates.
///
/// The whole update is rejected, leaving parameters and state untouched, if
/// any gradient entry is NaN or infinite.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    lrs: &[f32],
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || lrs.len() != params.len() || state.first.len() != params.len()
    {
        return Err(Error::contract(format!(
            "adamw: {} params, {} grads, {} lrs, {} moment slots",
            params.len(),
            grads.len(),
            lrs.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.first[i].len() != p.len() {
            return Err(Error::shape("adamw", p.shape(), &[g.len()]));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} has {} at entry {j}; update rejected",
                g[j]
            )));
        }
        if !(lrs[i] > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {}",
                lrs[i]
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1 as f64, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2 as f64, t as f64);
    let (b1, b2) = (cfg.beta1, cfg.beta2);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = lrs[i];
        let decay = 1.0 - lr * cfg.weight_decay;
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            let update = lr as f64 * m_hat / (libm::sqrt(v_hat) + cfg.eps as f64);
            *w = *w * decay - update as f32;
        }
    }
    Ok(())
}

/// Polynomial decay `base_lr · (1 − step/max_steps)^power`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolyLr {
    pub base_lr: f32,
    pub max_steps: u64,
    pub power: f32,
}

impl PolyLr {
    pub fn new(base_lr: f32, max_steps: u64, power: f32) -> Result<Self> {
        if !(base_lr > 0.0) || max_steps == 0 || !(power > 0.0) {
            return Err(Error::Config(format!(
                "poly schedule needs positive base_lr, max_steps and power (got {base_lr}, {max_steps}, {power})"
            )));
        }
        Ok(PolyLr {
            base_lr,
            max_steps,
            power,
        })
    }

    /// Learning rate at `step`; steps past `max_steps` get [`MIN_LR`].
    pub fn lr(&self, step: u64) -> f32 {
        if step >= self.max_steps {
            return MIN_LR.min(self.base_lr);
        }
        let frac = 1.0 - step as f64 / self.max_steps as f64;
        let lr = self.base_lr as f64 * libm::pow(frac, self.power as f64);
        (lr as f32).max(MIN_LR.min(self.base_lr))
    }
}
