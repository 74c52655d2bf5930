//! Adam with bias correction over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::math::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers for one parameter group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

impl<S: Real> OptimState<S> {
    pub fn new(len: usize) -> OptimState<S> {
        OptimState { m: vec![S::ZERO; len], v: vec![S::ZERO; len], step: 0 }
    }
}

/// One bias-corrected Adam update. The step counter advances by one; pass
/// the same state every call.
pub fn adam_step<S: Real>(params: &mut [S], grads: &[S], state: &mut OptimState<S>, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let b1 = S::from_f64(ADAM_BETA1);
    let b2 = S::from_f64(ADAM_BETA2);
    let one = S::ONE;
    let eps = S::from_f64(ADAM_EPS);
    let bc1 = S::from_f64(1.0 - ADAM_BETA1.powi(state.step as i32));
    let bc2 = S::from_f64(1.0 - ADAM_BETA2.powi(state.step as i32));
    let lr_s = S::from_f64(lr);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![0.5f64, -0.25, 1.0];
        let g = vec![0.0; 3];
        let mut state = OptimState::new(3);
        adam_step(&mut p, &g, &mut state, 1e-3);
        assert_eq!(p, vec![0.5, -0.25, 1.0]);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // with zero state, m_hat = g and v_hat = g^2, so the update is
        // -lr * g / (|g| + eps) ~ -lr * sign(g)
        let mut p = vec![0.0f64, 0.0];
        let g = vec![3.0, -0.2];
        let mut state = OptimState::new(2);
        let lr = 1e-3;
        adam_step(&mut p, &g, &mut state, lr);
        assert!((p[0] + lr).abs() < 1e-9, "step {p:?}");
        assert!((p[1] - lr).abs() < 1e-7);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = vec![1.0f64];
        let g = vec![2.0];
        let mut state = OptimState::new(1);
        let first = {
            adam_step(&mut p, &g, &mut state, 1e-2);
            p[0]
        };
        adam_step(&mut p, &g, &mut state, 1e-2);
        let second = p[0];
        assert!(first < 1.0);
        assert!(second < first);
    }
}
