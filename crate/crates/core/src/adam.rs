//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self { config, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One descent step `θ ← θ - lr · m̂ / (√v̂ + ε)`.
    ///
    /// A gradient containing a non-finite entry is refused and leaves both
    /// the parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("adam parameters", self.m.len(), params.len())?;
        check_dim("adam gradient", self.m.len(), grads.len())?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { term: "gradient" });
        }
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= learning_rate * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut p = [1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_scalar_by_hand() {
        // m̂ = g, v̂ = g², update = lr · g / (|g| + ε)
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(1, cfg);
        let mut p = [0.5];
        s.step(&mut p, &[0.2]).unwrap();
        let expect = 0.5 - cfg.learning_rate * 0.2 / (0.2 + cfg.eps);
        assert!((p[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_reference() {
        fn reference(steps: usize, g: f64, lr: f64) -> f64 {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            let (mut m, mut v, mut x) = (0.0, 0.0, 0.0);
            for t in 1..=steps {
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t as i32));
                let vh = v / (1.0 - b2.powi(t as i32));
                x -= lr * mh / (vh.sqrt() + eps);
            }
            x
        }
        let mut s = AdamState::new(1, AdamConfig { learning_rate: 0.1, ..Default::default() });
        let mut p = [0.0];
        s.step(&mut p, &[1.0]).unwrap();
        s.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - reference(2, 1.0, 0.1)).abs() < 1e-15);
        assert!((p[0] + 0.2).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut p = [1.0, 1.0];
        assert!(matches!(s.step(&mut p, &[0.1, f64::NAN]), Err(Error::NonFinite { .. })));
        assert_eq!(p, [1.0, 1.0]);
        assert_eq!(s.step, 0);
    }
}
