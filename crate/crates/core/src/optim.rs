//! Adam optimizer with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Optimizer state for one group of parameters.
///
/// Moment buffers are laid out in the same order the parameters are passed
/// to [`adam_step`]; callers must keep that order stable across steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step counter, incremented once per [`adam_step`] call.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("adam lr must be nonnegative, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::InvalidConfig(format!(
                "adam betas must lie in [0, 1), got {beta1} and {beta2}"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!("adam eps must be positive, got {eps}")));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Conventional defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
    pub fn with_defaults() -> Self {
        AdamState::new(1e-3, 0.9, 0.999, 1e-8).expect("defaults are valid")
    }
}

/// One Adam update over a parameter group.
///
/// Parameters with no accumulated gradient are treated as having zero
/// gradient (their moments still decay). Moment buffers are allocated on
/// first use and checked for size drift afterwards.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor]) -> Result<()> {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    if state.m.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "adam state tracks {} parameter groups, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);

    for (k, p) in params.iter_mut().enumerate() {
        if state.m[k].len() != p.numel() {
            return Err(Error::InvalidInput(format!(
                "adam moment buffer {k} holds {} values but parameter has {}",
                state.m[k].len(),
                p.numel()
            )));
        }
        let grad: Vec<f64> = match p.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; p.numel()],
        };
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        let data = p.data_mut();
        for i in 0..data.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
