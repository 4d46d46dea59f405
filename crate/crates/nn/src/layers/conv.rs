use rand::Rng;

use crate::init;
use crate::param::{join, Module, Param, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    pub fn num_parameters(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias { self.out_channels } else { 0 }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Convolution through im2col and a single GEMM per batch item.
///
/// The weight is stored `out × (in·k·k)`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let weight = Param::new(
            vec![spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            init::kaiming_uniform(rng, spec.out_channels * fan_in, fan_in),
            ParamKind::Weight,
        );
        let bias = spec.bias.then(|| {
            Param::new(
                vec![spec.out_channels],
                init::uniform(rng, spec.out_channels, 1.0 / (fan_in as f64).sqrt()),
                ParamKind::Bias,
            )
        });
        Self {
            spec,
            weight,
            bias,
            input: None,
        }
    }

    pub fn zeroed(spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: Param::zeros(
                vec![spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
                ParamKind::Weight,
            ),
            bias: spec.bias.then(|| Param::zeros(vec![spec.out_channels], ParamKind::Bias)),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    /// Forward pass without caching the input for backward.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = &self.spec;
        assert_eq!(x.c(), s.in_channels, "conv input channels");
        let (oh, ow) = s
            .output_size(x.h(), x.w())
            .unwrap_or_else(|| panic!("conv kernel {} does not fit {}×{}", s.kernel, x.h(), x.w()));
        let ckk = s.in_channels * s.kernel * s.kernel;
        let plane = oh * ow;
        let mut y = Tensor::zeros([x.n(), s.out_channels, oh, ow]);
        let mut cols = if s.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
        for i in 0..x.n() {
            let src: &[T] = if s.is_pointwise() {
                x.item(i)
            } else {
                im2col(x.item(i), x.h(), x.w(), s, oh, ow, &mut cols);
                &cols
            };
            let out = y.item_mut(i);
            if let Some(b) = &self.bias {
                for (o, chunk) in out.chunks_exact_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = b.value[o]);
                }
            }
            let beta = if self.bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                s.out_channels,
                ckk,
                plane,
                T::one(),
                &self.weight.value,
                (ckk, 1),
                src,
                (plane, 1),
                beta,
                out,
                (plane, 1),
            );
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward without forward");
        let s = self.spec;
        let (oh, ow) = (dy.h(), dy.w());
        let ckk = s.in_channels * s.kernel * s.kernel;
        let plane = oh * ow;
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); ckk * plane];
        let mut dcols = vec![T::zero(); ckk * plane];
        for i in 0..x.n() {
            let g = dy.item(i);
            if let Some(b) = &mut self.bias {
                for (o, chunk) in g.chunks_exact(plane).enumerate() {
                    b.grad[o] += chunk.iter().copied().sum::<T>();
                }
            }
            let src: &[T] = if s.is_pointwise() {
                x.item(i)
            } else {
                im2col(x.item(i), x.h(), x.w(), &s, oh, ow, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            T::gemm(
                s.out_channels,
                plane,
                ckk,
                T::one(),
                g,
                (plane, 1),
                src,
                (1, plane),
                T::one(),
                &mut self.weight.grad,
                (ckk, 1),
            );
            // dcols = Wᵀ · dY
            let target: &mut [T] = if s.is_pointwise() { dx.item_mut(i) } else { &mut dcols };
            T::gemm(
                ckk,
                s.out_channels,
                plane,
                T::one(),
                &self.weight.value,
                (1, ckk),
                g,
                (plane, 1),
                T::zero(),
                target,
                (plane, 1),
            );
            if !s.is_pointwise() {
                col2im(&dcols, x.h(), x.w(), &s, oh, ow, dx.item_mut(i));
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, s: &ConvSpec, oh: usize, ow: usize, cols: &mut [T]) {
    let k = s.kernel;
    let plane = oh * ow;
    for c in 0..s.in_channels {
        let chan = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, s: &ConvSpec, oh: usize, ow: usize, dx: &mut [T]) {
    let k = s.kernel;
    let plane = oh * ow;
    for c in 0..s.in_channels {
        let chan = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn direct(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let s = conv.spec;
        let (oh, ow) = s.output_size(x.h(), x.w()).unwrap();
        let mut y = Tensor::zeros([x.n(), s.out_channels, oh, ow]);
        for n in 0..x.n() {
            for o in 0..s.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for c in 0..s.in_channels {
                            for ky in 0..s.kernel {
                                for kx in 0..s.kernel {
                                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                    let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * s.in_channels + c) * s.kernel + ky) * s.kernel + kx];
                                    acc += wv * x.item(n)[(c * x.h() + iy as usize) * x.w() + ix as usize];
                                }
                            }
                        }
                        y.item_mut(n)[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_input(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::new(shape, init::uniform(rng, len, 1.0))
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [
            ConvSpec::new(3, 4, 3).padding(1),
            ConvSpec::new(2, 5, 3).stride(2).padding(1).no_bias(),
            ConvSpec::new(3, 2, 5).stride(4).padding(2),
            ConvSpec::new(4, 3, 1),
            ConvSpec::new(4, 3, 3),
        ] {
            let conv = Conv2d::<f64>::new(spec, &mut rng);
            let x = random_input(&mut rng, [2, spec.in_channels, 9, 7]);
            let (a, b) = (conv.infer(&x), direct(&x, &conv));
            assert_eq!(a.shape(), b.shape());
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-12, "{spec:?}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for spec in [ConvSpec::new(2, 3, 3).stride(2).padding(1), ConvSpec::new(3, 2, 1)] {
            let mut conv = Conv2d::<f64>::new(spec, &mut rng);
            let x = random_input(&mut rng, [2, spec.in_channels, 5, 6]);
            let y = conv.forward(&x);
            let probe = random_input(&mut rng, y.shape());
            let dx = conv.backward(&probe);
            let loss = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
                c.infer(x).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for idx in [0, 3, x.len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= h;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
                assert!((fd - dx.data()[idx]).abs() < 1e-7);
            }
            for idx in [0, conv.weight.len() / 2, conv.weight.len() - 1] {
                let analytic = conv.weight.grad[idx];
                let mut c2 = conv.clone();
                c2.weight.value[idx] += h;
                let up = loss(&c2, &x);
                c2.weight.value[idx] -= 2.0 * h;
                let down = loss(&c2, &x);
                assert!(((up - down) / (2.0 * h) - analytic).abs() < 1e-7);
            }
            if let Some(b) = &conv.bias {
                let analytic = b.grad[1];
                let mut c2 = conv.clone();
                c2.bias.as_mut().unwrap().value[1] += h;
                let up = loss(&c2, &x);
                c2.bias.as_mut().unwrap().value[1] -= 2.0 * h;
                let down = loss(&c2, &x);
                assert!(((up - down) / (2.0 * h) - analytic).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn output_size_arithmetic() {
        assert_eq!(ConvSpec::new(512, 512, 3).output_size(7, 7), Some((5, 5)));
        assert_eq!(ConvSpec::new(3, 64, 7).stride(2).padding(3).output_size(224, 224), Some((112, 112)));
        assert_eq!(ConvSpec::new(1, 1, 3).output_size(2, 2), None);
    }
}
