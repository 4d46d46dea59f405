use crate::scalar::Scalar;

/// How the optimizer treats a parameter; weight decay only touches weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>, kind: ParamKind) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            value,
            grad,
            shape,
            kind,
        }
    }

    pub fn zeros(shape: Vec<usize>, kind: ParamKind) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![T::zero(); len], kind)
    }

    pub fn filled(shape: Vec<usize>, value: T, kind: ParamKind) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len], kind)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Non-learnable state that is still checkpointed (running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub value: Vec<T>,
    pub shape: Vec<usize>,
}

/// Named traversal over parameters and buffers, used by optimizers,
/// checkpointing and gradient checks.
pub trait Module<T: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Buffer<T>)) {}

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn num_parameters(&mut self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, p| total += p.len());
        total
    }
}

/// Join a module path: `join("rgb", "stem")` is `"rgb.stem"`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
