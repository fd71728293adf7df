use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        ensure!(
            params.len() == self.m.len() && grads.len() == self.m.len(),
            Dimension,
            "adam state holds {} moments, got {} params and {} gradients",
            self.m.len(),
            params.len(),
            grads.len()
        );
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_first_step_is_noop() {
        let mut s = AdamState::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let mut s = AdamState::new(2, 1e-3);
        let mut p = vec![0.0, 0.0];
        s.step(&mut p, &[0.5, -4.0]).unwrap();
        assert!((p[0] + 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 1e-3 * 4.0 / (4.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn moments_decay_without_gradient() {
        let mut s = AdamState::new(1, 1e-3);
        let mut p = vec![0.0];
        s.step(&mut p, &[2.0]).unwrap();
        let (m1, v1) = (s.m[0], s.v[0]);
        s.step(&mut p, &[0.0]).unwrap();
        s.step(&mut p, &[0.0]).unwrap();
        assert!((s.m[0] - m1 * 0.81).abs() < 1e-15);
        assert!((s.v[0] - v1 * 0.999 * 0.999).abs() < 1e-15);
        assert!(s.step(&mut p, &[0.0, 1.0]).is_err());
    }
}
