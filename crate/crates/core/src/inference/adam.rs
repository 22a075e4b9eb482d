//! ADAM, used here for gradient ascent.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected ascent step: `params += lr·m̂/(√v̂ + ε)`.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, learning_rate: f64) {
    assert_eq!(params.len(), grad.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    state.t += 1;
    let c1 = 1.0 - state.beta1.powf(state.t as f64);
    let c2 = 1.0 - state.beta2.powf(state.t as f64);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] += learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
}
