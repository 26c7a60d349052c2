use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-decay learning-rate schedule: `base_lr * decay_factor^(epoch / decay_every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for StepLr {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 100,
        }
    }
}

impl StepLr {
    /// A schedule that never decays.
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            decay_factor: 1.0,
            decay_every: usize::MAX,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = epoch / self.decay_every.max(1);
        self.base_lr * self.decay_factor.powi(drops as i32)
    }
}

/// Adam moments plus the schedule that drives the step size.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub schedule: StepLr,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize, schedule: StepLr) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn effective_lr(&self, epoch: usize) -> f64 {
        self.schedule.lr_at(epoch)
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, epoch: usize) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {}/{} moments",
            n,
            grads.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let lr = state.effective_lr(epoch);
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..n {
        let g = grads[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + state.epsilon);
    }
    Ok(())
}
