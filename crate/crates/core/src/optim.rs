//! AdamW with decoupled weight decay and bias correction.

use crate::error::{PearError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over `params`, reading each tensor's gradient (an absent
/// gradient counts as zero). The parameter list must keep the same shapes
/// and order across calls that share `state`.
pub fn adamw_step(params: &mut [&mut Tensor], state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if state.first.is_empty() && state.step == 0 {
        state.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(PearError::shape("adamw", &[state.first.len()], &[params.len()]));
    }
    for (p, m) in params.iter().zip(&state.first) {
        if p.numel() != m.len() {
            return Err(PearError::shape("adamw", p.shape(), &[m.len()]));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;

    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let grad = p.grad_or_zeros();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            *w = *w * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
