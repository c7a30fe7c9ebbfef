use super::params::ParamLayout;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdamError {
    #[error("expected {expected} parameters, got {got} ({what})")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("non-finite gradient in block `{block}` (flat index {index})")]
    NonFiniteGradient { block: String, index: usize },
}

/// Moment estimates and step counter for one flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub layout: ParamLayout,
}

impl AdamState {
    pub fn new(layout: ParamLayout, config: AdamConfig) -> Self {
        let n = layout.total();
        AdamState { config, m: vec![0.0; n], v: vec![0.0; n], t: 0, layout }
    }
}

/// One bias-corrected ADAM update, in place.
///
/// Gradients are checked for finiteness before anything is modified.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), AdamError> {
    let n = state.m.len();
    if params.len() != n {
        return Err(AdamError::Length { what: "params", expected: n, got: params.len() });
    }
    if grads.len() != n {
        return Err(AdamError::Length { what: "grads", expected: n, got: grads.len() });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        let block = state.layout.block_at(index).map_or_else(|| "<unnamed>".to_string(), |b| b.name.clone());
        return Err(AdamError::NonFiniteGradient { block, index });
    }
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}
