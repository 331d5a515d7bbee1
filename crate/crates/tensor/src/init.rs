//! Weight initialization.

use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fan-in-scaled uniform (He-style) init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
///
/// The caller derives `seed` from a base seed and the parameter name, so
/// identical names yield identical tensors across builds — which is what
/// makes warm-start and freeze comparisons bitwise meaningful.
pub fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, seed: u64) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut rng = DetRng::seed(seed);
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| T::from_f64(rng.range(-limit, limit))).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_and_reproducible() {
        let a: Tensor<f64> = he_uniform(vec![4, 9], 9, 42);
        let b: Tensor<f64> = he_uniform(vec![4, 9], 9, 42);
        assert!(a.bit_eq(&b));
        let limit = (6.0f64 / 9.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= limit));
        let c: Tensor<f64> = he_uniform(vec![4, 9], 9, 43);
        assert!(!a.bit_eq(&c));
    }
}
