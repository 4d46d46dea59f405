//! Row-wise log-softmax and the negative log-likelihood loss.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Log-softmax over the `C` axis of an `N × C × 1 × 1` tensor.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.item_len();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(logits.shape(), out)
}

/// Given `y = log_softmax(x)` and `dL/dy`, returns `dL/dx`.
pub fn log_softmax_backward<T: Scalar>(log_probs: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let k = log_probs.item_len();
    let mut out = Vec::with_capacity(dy.len());
    for (lp, g) in log_probs.data().chunks_exact(k).zip(dy.data().chunks_exact(k)) {
        let total: T = g.iter().copied().sum();
        out.extend(lp.iter().zip(g).map(|(&l, &gi)| gi - l.exp() * total));
    }
    Tensor::new(dy.shape(), out)
}

/// Mean over the batch of `-log_probs[i, target_i]`.
pub fn nll_loss<T: Scalar>(log_probs: &Tensor<T>, targets: &[usize]) -> T {
    let k = log_probs.item_len();
    assert_eq!(log_probs.n(), targets.len(), "one target per row");
    let total: T = log_probs
        .data()
        .chunks_exact(k)
        .zip(targets)
        .map(|(row, &t)| -row[t])
        .sum();
    total / T::from_usize(targets.len().max(1)).unwrap()
}

pub fn nll_loss_backward<T: Scalar>(log_probs: &Tensor<T>, targets: &[usize]) -> Tensor<T> {
    let k = log_probs.item_len();
    let scale = -T::one() / T::from_usize(targets.len().max(1)).unwrap();
    let mut g = Tensor::zeros(log_probs.shape());
    for (row, &t) in g.data_mut().chunks_exact_mut(k).zip(targets) {
        row[t] = scale;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_hand_values() {
        let y = log_softmax(&Tensor::<f64>::matrix(2, 2, vec![1.0, 0.0, 3.0, 3.0]));
        let a = -(1.0 + (-1.0f64).exp()).ln();
        assert!((y.data()[0] - a).abs() < 1e-15);
        assert!((y.data()[1] - (a - 1.0)).abs() < 1e-15);
        assert!((y.data()[2] + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_backward_matches_finite_differences() {
        let x = Tensor::<f64>::matrix(1, 3, vec![0.3, -1.2, 2.0]);
        let probe = [0.5, -1.0, 2.0];
        let f = |x: &Tensor<f64>| -> f64 { log_softmax(x).data().iter().zip(probe).map(|(a, b)| a * b).sum() };
        let g = log_softmax_backward(&log_softmax(&x), &Tensor::matrix(1, 3, probe.to_vec()));
        for i in 0..3 {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-6;
            assert!(((f(&p) - f(&m)) / 2e-6 - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn nll_mean_over_batch() {
        let lp = Tensor::<f64>::matrix(2, 2, vec![0.0, f64::NEG_INFINITY, -std::f64::consts::LN_2, -std::f64::consts::LN_2]);
        let loss = nll_loss(&lp, &[0, 1]);
        assert!((loss - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
        let g = nll_loss_backward(&lp, &[0, 1]);
        assert_eq!(g.data(), &[-0.5, 0.0, 0.0, -0.5]);
    }
}
