use rand::Rng;

use crate::init;
use crate::param::{join, Module, Param, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fully connected layer `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Weights and bias drawn from `U(±1/√in)`.
    pub fn new(in_features: usize, out_features: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        Self::from_values(
            in_features,
            out_features,
            init::uniform(rng, in_features * out_features, bound),
            bias.then(|| init::uniform(rng, out_features, bound)),
        )
    }

    /// Bias-free layer with Kaiming-uniform weights.
    pub fn kaiming(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self::from_values(
            in_features,
            out_features,
            init::kaiming_uniform(rng, in_features * out_features, in_features),
            None,
        )
    }

    pub fn from_values(in_features: usize, out_features: usize, weight: Vec<T>, bias: Option<Vec<T>>) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::new(vec![out_features, in_features], weight, ParamKind::Weight),
            bias: bias.map(|b| Param::new(vec![out_features], b, ParamKind::Bias)),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.item_len(), self.in_features, "linear input features");
        let n = x.n();
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        if let Some(b) = &self.bias {
            for row in y.data_mut().chunks_exact_mut(self.out_features) {
                row.copy_from_slice(&b.value);
            }
        }
        let beta = if self.bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            (self.in_features, 1),
            &self.weight.value,
            (1, self.in_features),
            beta,
            y.data_mut(),
            (self.out_features, 1),
        );
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("linear backward without forward");
        let n = x.n();
        if let Some(b) = &mut self.bias {
            for row in dy.data().chunks_exact(self.out_features) {
                for (g, &d) in b.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        // dW += dYᵀ X
        T::gemm(
            self.out_features,
            n,
            self.in_features,
            T::one(),
            dy.data(),
            (1, self.out_features),
            x.data(),
            (self.in_features, 1),
            T::one(),
            &mut self.weight.grad,
            (self.in_features, 1),
        );
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            n,
            self.out_features,
            self.in_features,
            T::one(),
            dy.data(),
            (self.out_features, 1),
            &self.weight.value,
            (self.in_features, 1),
            T::zero(),
            dx.data_mut(),
            (self.in_features, 1),
        );
        dx
    }

    /// Row `class` of the weight matrix.
    pub fn weight_row(&self, class: usize) -> &[T] {
        &self.weight.value[class * self.in_features..(class + 1) * self.in_features]
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
