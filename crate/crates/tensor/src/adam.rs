use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    /// Completed steps; increments by one per `step`.
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    // running beta^t, kept in working precision for reproducibility
    b1_pow: T,
    b2_pow: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self::with_hyper(len, learning_rate, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    }

    pub fn with_hyper(len: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2));
        AdamState {
            m: vec![T::ZERO; len],
            v: vec![T::ZERO; len],
            t: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            b1_pow: T::ONE,
            b2_pow: T::ONE,
        }
    }

    /// One bias-corrected update in place. `name` labels the parameter in
    /// diagnostics; a non-finite gradient aborts with that name.
    pub fn step(&mut self, param: &mut [T], grad: &[T], name: &str) -> Result<()> {
        if param.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "parameter '{name}': param {} / grad {} / state {}",
                    param.len(),
                    grad.len(),
                    self.m.len()
                ),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { what: "gradient", name: name.to_string() });
        }
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let lr = T::from_f64(self.learning_rate);
        let eps = T::from_f64(self.epsilon);
        self.b1_pow *= b1;
        self.b2_pow *= b2;
        let c1 = T::ONE / (T::ONE - self.b1_pow);
        let c2 = T::ONE / (T::ONE - self.b2_pow);
        for ((p, &g), (m, v)) in param.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (T::ONE - b1) * g;
            *v = b2 * *v + (T::ONE - b2) * g * g;
            let m_hat = *m * c1;
            let v_hat = *v * c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
