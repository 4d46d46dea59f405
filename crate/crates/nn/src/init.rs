use rand::Rng;

use crate::scalar::Scalar;

/// Kaiming-uniform for ReLU networks: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar>(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(rng, len, bound)
}

/// `U(-bound, bound)` samples.
pub fn uniform<T: Scalar>(rng: &mut impl Rng, len: usize, bound: f64) -> Vec<T> {
    (0..len)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect()
}
