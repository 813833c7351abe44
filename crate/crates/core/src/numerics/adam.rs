//! Bias-corrected Adam.

use super::error::NumericsError;
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-3 }
    }
}

/// Per-parameter first and second moment estimates plus a step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One Adam update in place. The state advances even for a zero gradient.
pub fn adam_step(
    param: &mut Tensor,
    grad: &[f64],
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<(), NumericsError> {
    if grad.len() != param.len() || state.m.len() != param.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "adam_step: param len {}, grad len {}, state len {}",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    let data = param.data_mut();
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}
