use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semattn_nn::functional::{log_softmax, nll_loss, nll_loss_backward, log_softmax_backward};
use semattn_nn::layers::{BatchNorm2d, Conv2d, ConvSpec, Linear};
use semattn_nn::{Mode, Tensor};

fn tensor(shape: [usize; 4], values: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, values.iter().cycle().take(n).copied().collect())
}

/// Direct seven-loop convolution.
fn conv_oracle(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
    let s = conv.spec;
    let (oh, ow) = s.output_size(x.h(), x.w()).unwrap();
    let mut y = Tensor::zeros([x.n(), s.out_channels, oh, ow]);
    for n in 0..x.n() {
        for o in 0..s.out_channels {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                    for c in 0..s.in_channels {
                        for ki in 0..s.kernel {
                            for kj in 0..s.kernel {
                                let (yy, xx) = ((i * s.stride + ki) as isize - s.padding as isize, (j * s.stride + kj) as isize - s.padding as isize);
                                if yy < 0 || xx < 0 || yy >= x.h() as isize || xx >= x.w() as isize {
                                    continue;
                                }
                                let w = conv.weight.value[((o * s.in_channels + c) * s.kernel + ki) * s.kernel + kj];
                                acc += w * x.data()[((n * x.c() + c) * x.h() + yy as usize) * x.w() + xx as usize];
                            }
                        }
                    }
                    y.data_mut()[((n * s.out_channels + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    y
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
}

fn conv_spec() -> impl Strategy<Value = ConvSpec> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2, any::<bool>()).prop_map(|(i, o, k, s, p, bias)| {
        let spec = ConvSpec::new(i, o, k).stride(s).padding(p.min(k / 2));
        if bias {
            spec
        } else {
            spec.no_bias()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn conv_matches_direct_loops(spec in conv_spec(), h in 3usize..8, w in 3usize..8, seed in any::<u64>(), vals in prop::collection::vec(-2.0f64..2.0, 1..64)) {
        let conv = Conv2d::<f64>::new(spec, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = tensor([2, spec.in_channels, h, w], &vals);
        let (a, b) = (conv.infer(&x), conv_oracle(&x, &conv));
        prop_assert_eq!(a.shape(), b.shape());
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_input_gradient_is_the_adjoint(spec in conv_spec(), h in 3usize..7, w in 3usize..7, seed in any::<u64>()) {
        // for a linear map A, <A x, r> = <x, A^T r>; bias breaks linearity
        let mut conv = Conv2d::<f64>::new(spec.no_bias(), &mut ChaCha8Rng::seed_from_u64(seed));
        let x = tensor([1, spec.in_channels, h, w], &[0.3, -1.2, 0.7, 2.0, -0.4]);
        let y = conv.forward(&x);
        let r = tensor(y.shape(), &[1.1, -0.6, 0.2, 0.9]);
        let dx = conv.backward(&r);
        prop_assert!((dot(&y, &r) - dot(&x, &dx)).abs() < 1e-9 * (1.0 + dot(&y, &r).abs()));
    }

    #[test]
    fn batchnorm_train_gradients(c in 1usize..4, h in 1usize..4, w in 1usize..4, vals in prop::collection::vec(-3.0f64..3.0, 8..40)) {
        let shape = [3, c, h, w];
        let x = tensor(shape, &vals);
        let probe = tensor(shape, &[0.5, -1.0, 0.25, 2.0, -0.75]);
        let mut bn = BatchNorm2d::<f64>::new(c);
        bn.gamma.value.iter_mut().enumerate().for_each(|(i, g)| *g = 1.0 + 0.1 * i as f64);
        let loss = |bn: &BatchNorm2d<f64>, x: &Tensor<f64>| dot(&bn.clone().forward(x, Mode::Train), &probe);
        let base = loss(&bn, &x);
        prop_assume!(base.is_finite());
        bn.forward(&x, Mode::Train);
        let dx = bn.backward(&probe);
        let step = 1e-6;
        for idx in [0, x.len() / 2, x.len() - 1] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += step;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= step;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * step);
            prop_assert!((fd - dx.data()[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "{} vs {}", fd, dx.data()[idx]);
        }
        let g = bn.gamma.grad[0];
        let mut b2 = bn.clone();
        b2.gamma.value[0] += step;
        let up = loss(&b2, &x);
        b2.gamma.value[0] -= 2.0 * step;
        let fd = (up - loss(&b2, &x)) / (2.0 * step);
        prop_assert!((fd - g).abs() < 1e-5 * (1.0 + fd.abs()));
    }

    #[test]
    fn linear_weight_gradient_is_outer_product(i in 1usize..6, o in 1usize..6, n in 1usize..4, seed in any::<u64>()) {
        let mut lin = Linear::<f64>::new(i, o, true, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = tensor([n, i, 1, 1], &[0.5, -0.25, 1.5, 2.0, -1.0, 0.75]);
        lin.forward(&x);
        let dy = tensor([n, o, 1, 1], &[1.0, -2.0, 0.5]);
        lin.backward(&dy);
        for r in 0..o {
            for c in 0..i {
                let expected: f64 = (0..n).map(|b| dy.data()[b * o + r] * x.data()[b * i + c]).sum();
                prop_assert!((lin.weight.grad[r * i + c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_normalizes_and_backprops(k in 2usize..8, vals in prop::collection::vec(-30.0f64..30.0, 2..32)) {
        let logits = tensor([2, k, 1, 1], &vals);
        let lp = log_softmax(&logits);
        for row in lp.data().chunks_exact(k) {
            prop_assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // d(nll)/d(logits) = softmax - onehot
        let targets = [0, k - 1];
        let d = log_softmax_backward(&lp, &nll_loss_backward(&lp, &targets));
        for (b, &t) in targets.iter().enumerate() {
            for j in 0..k {
                let p = lp.data()[b * k + j].exp();
                let expected = (p - if j == t { 1.0 } else { 0.0 }) / 2.0;
                prop_assert!((d.data()[b * k + j] - expected).abs() < 1e-12);
            }
        }
        prop_assert!(nll_loss(&lp, &targets) >= 0.0);
    }
}
