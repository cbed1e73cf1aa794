//! Learning-rate schedule, Adam and gradient clipping.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{Gradients, Model, OptimizerState, Scalar};

pub const DEFAULT_WARMUP: u64 = 4000;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> f64 {
    assert!(step >= 1, "noam_lr is defined for step >= 1");
    let s = step as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup: u64,
    /// Multiplier on the schedule; 1.0 is the plain formula.
    pub scale: f64,
    /// Restart the step counter at every stage instead of continuing it.
    pub reset_per_stage: bool,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup: DEFAULT_WARMUP,
            scale: 1.0,
            reset_per_stage: false,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: u64, d_model: usize) -> f64 {
        self.scale * noam_lr(step, d_model, self.warmup)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a single buffer at step `t` (1-based).
pub fn adam_update<F: Scalar>(theta: &mut [F], grad: &[F], m: &mut [F], v: &mut [F], t: u64, lr: f64, hp: AdamParams) {
    let (b1, b2) = (hp.beta1, hp.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i].to_f64();
        let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
        let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
        m[i] = F::from_f64(mi);
        v[i] = F::from_f64(vi);
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        theta[i] = F::from_f64(theta[i].to_f64() - lr * m_hat / (v_hat.sqrt() + hp.eps));
    }
}

/// Advances the optimizer step and updates every parameter of the model.
pub fn adam_step(model: &mut Model<f32>, grads: &Gradients<f32>, state: &mut OptimizerState, lr: f64, hp: AdamParams) -> Result<(), TrainError> {
    if state.is_fresh() {
        let step = state.step;
        *state = OptimizerState::fresh(model);
        state.step = step;
    }
    let params = model.params_mut();
    if grads.tensors.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::ShapeMismatch("gradient count differs from parameter count".into()));
    }
    state.step += 1;
    let t = state.step;
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads.tensors[i];
        if g.len() != p.data.len() {
            return Err(TrainError::ShapeMismatch(format!("gradient {i} has {} values, parameter has {}", g.len(), p.data.len())));
        }
        adam_update(&mut p.data, g, &mut state.m[i], &mut state.v[i], t, lr, hp);
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(F::from_f64(max_norm / norm));
    }
    norm
}
