use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.mask = x.data().iter().map(|&v| v > T::zero()).collect();
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.mask.len(), dy.len(), "relu backward shape");
        let data = dy
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| if m { g } else { T::zero() })
            .collect();
        Tensor::new(dy.shape(), data)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Self { out: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.map(sigmoid);
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("sigmoid backward without forward");
        dy.zip_map(&y, |g, s| g * s * (T::one() - s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(2.0f64) - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert!((sigmoid(-800.0f64)).abs() < 1e-300);
        assert!((sigmoid(3.0f64) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_masks_gradient() {
        let mut r = Relu::new();
        let y = r.forward(&Tensor::<f32>::new([1, 3, 1, 1], vec![-1., 0., 2.]));
        assert_eq!(y.data(), &[0., 0., 2.]);
        let g = r.backward(&Tensor::new([1, 3, 1, 1], vec![5., 5., 5.]));
        assert_eq!(g.data(), &[0., 0., 5.]);
    }
}
