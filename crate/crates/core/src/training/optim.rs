//! Optimizers and learning-rate schedules.

use std::collections::BTreeMap;

use semattn_nn::{Param, ParamKind, Scalar};
use serde::{Deserialize, Serialize};

/// `v ← m·v + g + wd·p; p ← p − lr·v`, elementwise.
pub fn sgd_momentum_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, m, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Which update rule a training run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
}

/// A parameter-update rule with per-parameter state addressed by name.
pub trait Optimizer<T: Scalar> {
    fn step(&mut self, name: &str, param: &mut Param<T>, lr: f64);

    /// Named state tensors for checkpointing.
    fn state(&self) -> Vec<(String, Vec<T>)>;

    fn load_state(&mut self, name: &str, values: Vec<T>);
}

/// Stochastic gradient descent with momentum; weight decay reaches
/// weights only, never biases or normalization parameters.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for SgdMomentum<T> {
    fn step(&mut self, name: &str, param: &mut Param<T>, lr: f64) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); param.len()]);
        let wd = if param.kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
        sgd_momentum_step(&mut param.value, &param.grad, v, lr, self.momentum, wd);
    }

    fn state(&self) -> Vec<(String, Vec<T>)> {
        self.velocity.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    fn load_state(&mut self, name: &str, values: Vec<T>) {
        self.velocity.insert(name.to_string(), values);
    }
}

/// Step decay: `lr0 · gamma^⌊(epoch − 1) / step⌋` for 1-based epochs.
pub fn step_decay(lr0: f64, gamma: f64, step_epochs: usize, epoch: usize) -> f64 {
    if step_epochs == 0 {
        return lr0;
    }
    lr0 * gamma.powi((epoch.saturating_sub(1) / step_epochs) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_unrolled_steps() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut p = [0.0f64];
        let mut v = [0.0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((p[0] + 0.1).abs() < 1e-15);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = [0.3f32, -2.0];
        let mut v = [0.0; 2];
        for _ in 0..5 {
            sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        }
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn decay_skips_biases() {
        let mut opt = SgdMomentum::<f64>::new(0.0, 0.5);
        let mut w = Param::filled(vec![1], 1.0, ParamKind::Weight);
        let mut b = Param::filled(vec![1], 1.0, ParamKind::Bias);
        opt.step("w", &mut w, 0.1);
        opt.step("b", &mut b, 0.1);
        assert!((w.value[0] - 0.95).abs() < 1e-15);
        assert_eq!(b.value[0], 1.0);
    }

    #[test]
    fn schedule() {
        assert_eq!(step_decay(0.1, 0.1, 15, 1), 0.1);
        assert_eq!(step_decay(0.1, 0.1, 15, 15), 0.1);
        assert!((step_decay(0.1, 0.1, 15, 16) - 0.01).abs() < 1e-15);
        assert!((step_decay(0.1, 0.1, 15, 31) - 0.001).abs() < 1e-15);
    }
}
