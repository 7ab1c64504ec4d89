use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// Bias-corrected Adam with decoupled weight decay on parameters flagged
/// `decay`. Parameters with `frozen(index)` true are left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    config: &AdamConfig,
    frozen: impl Fn(usize) -> bool,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.value.numel() {
            return Err(Error::DimensionMismatch(format!("gradient of {} has {} entries", p.name, g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - config.beta1.powf(t);
    let bc2 = 1.0 - config.beta2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        if frozen(i) {
            continue;
        }
        let decay = if p.decay { lr * weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, theta) in p.value.data_mut().iter_mut().enumerate() {
            let gk = grads[i][k];
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
            let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + config.eps);
            *theta -= decay * *theta + lr * update;
        }
    }
    Ok(())
}
