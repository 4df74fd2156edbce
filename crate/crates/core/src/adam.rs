//! ADAM with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One elementwise update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::dimension("adam parameters", self.first.len(), params.len()));
        }
        if grads.len() != params.len() {
            return Err(Error::dimension("adam gradients", params.len(), grads.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 3.5];
        s.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1, v = 0.001; bias corrections give m_hat = v_hat = 1
        let mut s = AdamState::new(1);
        let mut p = vec![0.0];
        s.step(&mut p, &[1.0], 0.1).unwrap();
        let expect = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut s = AdamState::new(2);
        let mut p = vec![0.5, 0.5];
        for g in [0.3, -1.2, 4.0] {
            s.step(&mut p, &[g, g], 0.01).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3], 0.1).is_err());
        assert!(s.step(&mut [0.0; 2], &[0.0; 1], 0.1).is_err());
    }
}
