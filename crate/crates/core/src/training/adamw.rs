use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::ParamRole;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of `params` in place. `step` is the 1-based count of
/// updates including this one. Decay is decoupled: it scales the parameter
/// directly and never enters the moment estimates.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut Moments,
    step: u64,
    cfg: &AdamWConfig,
    decay: bool,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("adamw_step", format!("{} grads for {} params", grads.len(), params.len())));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("adamw step counter starts at 1".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} = {}", grads[i])));
    }
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let shrink = if decay { 1.0 - cfg.learning_rate * cfg.weight_decay } else { 1.0 };
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * shrink - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over named tensors. Gate logits are exempt from weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every tensor that carries a gradient buffer, then clears it.
    pub fn step(&mut self, params: Vec<(String, ParamRole, &mut Tensor)>) -> Result<()> {
        self.step += 1;
        for (name, role, t) in params {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else { continue };
            let state = self.state.entry(name).or_default();
            adamw_step(t.data_mut(), &grad, state, self.step, &self.config, role != ParamRole::Gate)?;
            t.zero_grad();
        }
        Ok(())
    }
}
