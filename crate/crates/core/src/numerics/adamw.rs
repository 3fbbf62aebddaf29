use crate::error::{Error, Result};
use crate::numerics::params::{GradSet, ParamSet};
use serde::{Deserialize, Serialize};

/// AdamW optimizer state. Moments mirror the optimized parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    /// Fresh state with zero moments, lr 1e-3, β1 0.9, β2 0.999, eps 1e-8,
    /// weight decay 0.
    pub fn new(params: &ParamSet, lr: f64) -> AdamWState {
        AdamWState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.lr > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid AdamW hyperparameters".into()))
        }
    }
}

/// One AdamW update with bias correction. Decoupled weight decay is applied
/// as θ ← θ − lr·wd·θ before the adaptive update.
pub fn adamw_step(params: &mut ParamSet, grads: &GradSet, state: &mut AdamWState) -> Result<()> {
    state.validate()?;
    params.check_aligned(grads, "adamw_step grads")?;
    params.check_aligned(&state.m, "adamw_step moments")?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (lr, b1, b2, eps, wd) = (state.lr, state.beta1, state.beta2, state.eps, state.weight_decay);
    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.data.len() {
            let grad = g.data[i];
            p.data[i] -= lr * wd * p.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * grad;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * grad * grad;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
