//! Adam optimizer with bias correction.

use super::Param;
use crate::error::TensorError;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment buffers are allocated per parameter, in the order given; every later
    /// `adam_step` must pass the same parameters in the same order.
    pub fn new(params: &[&Param]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One Adam update. Consumes and zeroes each parameter's gradient.
pub fn adam_step(
    params: &mut [&mut Param],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    assert_eq!(params.len(), state.m.len(), "optimizer state/parameter count mismatch");
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p
            .grad
            .take()
            .ok_or_else(|| TensorError::MissingGradient(p.name.clone()))?;
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        assert_eq!(g.len(), m.len(), "gradient/state length mismatch for {}", p.name);
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.values[j] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
