use serde::{Deserialize, Serialize};

use super::{Gradient, ParameterSet};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state with beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(len: usize, lr: f64) -> Self {
        Self::with_betas(len, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(len: usize, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            lr,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !in_unit(self.beta1) || !in_unit(self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Validation(format!(
                "invalid Adam hyperparameters lr={} beta1={} beta2={} eps={}",
                self.lr, self.beta1, self.beta2, self.epsilon
            )));
        }
        if self.first_moment.len() != self.second_moment.len() {
            return Err(Error::Validation("Adam moment lengths differ".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Leaves state and parameters untouched on error.
pub fn adam_step(state: &mut AdamState, params: &mut ParameterSet, grad: &Gradient) -> Result<()> {
    if grad.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::Usage(format!(
            "shape mismatch: params {}, gradient {}, moments {}",
            params.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    if let Some(i) = grad.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry {i}: {}", grad.values[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, m), v), &g) in params
        .values
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
        .zip(&grad.values)
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
