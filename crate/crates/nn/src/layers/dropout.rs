use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Mode;

/// Inverted dropout; identity in eval mode or when `p == 0`.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1)");
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if matches!(mode, Mode::Eval) || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if self.rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * T::from_f64_lossy(m)).collect();
        self.mask = Some(mask);
        Tensor::new(x.shape(), data)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match self.mask.take() {
            None => dy.clone(),
            Some(mask) => {
                let data = dy.data().iter().zip(&mask).map(|(&g, &m)| g * T::from_f64_lossy(m)).collect();
                Tensor::new(dy.shape(), data)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_mode_is_identity() {
        let mut d = Dropout::new(0.5, 1);
        let x = Tensor::<f32>::new([1, 4, 1, 1], vec![1., 2., 3., 4.]);
        assert_eq!(d.forward(&x, Mode::Eval), x);
        assert_eq!(d.forward(&x, Mode::Eval), x);
    }

    #[test]
    fn train_mode_zeroes_or_rescales() {
        let mut d = Dropout::new(0.5, 7);
        let x = Tensor::<f64>::full([1, 64, 1, 1], 1.0);
        let y = d.forward(&x, Mode::Train);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(y.data().iter().any(|&v| v == 0.0));
    }
}
