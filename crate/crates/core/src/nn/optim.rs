use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A trainable tensor with its gradient and Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub step: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
        }
    }

    /// Apply one update to every parameter from its accumulated gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let Param { value, grad, m, v } = &mut **p;
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Param::new(vec![1.0, -2.0, 3.5]);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value, vec![1.0, -2.0, 3.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Param::new(vec![1.0]);
        p.grad[0] = 2.0;
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p]).unwrap();
        let want = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((p.value[0] - want).abs() < 1e-15);
        assert!((p.value[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = Param::new(vec![0.0, 0.0]);
        let mut adam = Adam::new(1e-3);
        let mut prev = p.value.clone();
        for _ in 0..2 {
            p.grad = vec![0.5, -3.0];
            adam.step(&mut [&mut p]).unwrap();
            assert!(p.value[0] < prev[0] && p.value[1] > prev[1]);
            prev = p.value.clone();
        }
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let mut p = Param::new(vec![1.0, 1.0]);
        p.grad = vec![1.0, f64::NAN];
        let mut adam = Adam::new(1e-3);
        assert!(matches!(adam.step(&mut [&mut p]), Err(Error::Numerical(_))));
        assert_eq!(p.value, vec![1.0, 1.0]);
        assert_eq!(adam.step, 0);
    }
}
