use serde::{Deserialize, Serialize};

use crate::{FarlError, Result};

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_num: f64,
}

impl OptimizerState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps_num: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.first_moment.len() {
        return Err(FarlError::ShapeMismatch(format!(
            "adam: params {} grad {} moments {}",
            params.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(FarlError::NonFinite(format!(
            "gradient entry {i} = {} at step {}",
            grad[i], state.step_count
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * grad[i];
        *v = state.beta2 * *v + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps_num);
    }
    Ok(())
}
