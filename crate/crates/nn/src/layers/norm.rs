use crate::param::{join, Buffer, Module, Param, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Mode;

/// Per-channel batch normalization over `N × H × W`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<NormCache<T>>,
}

#[derive(Clone, Debug)]
struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], T::one(), ParamKind::Norm),
            beta: Param::zeros(vec![channels], ParamKind::Norm),
            running_mean: Buffer {
                value: vec![T::zero(); channels],
                shape: vec![channels],
            },
            running_var: Buffer {
                value: vec![T::one(); channels],
                shape: vec![channels],
            },
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let c = self.channels();
        assert_eq!(x.c(), c, "batchnorm channels");
        let plane = x.plane();
        let count = x.n() * plane;
        let eps = T::from_f64_lossy(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for i in 0..x.n() {
                    for (ch, chunk) in x.item(i).chunks_exact(plane).enumerate() {
                        mean[ch] += chunk.iter().copied().sum::<T>();
                    }
                }
                let inv_count = T::one() / T::from_usize(count).unwrap();
                mean.iter_mut().for_each(|m| *m *= inv_count);
                for i in 0..x.n() {
                    for (ch, chunk) in x.item(i).chunks_exact(plane).enumerate() {
                        var[ch] += chunk.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv_count);
                let m = T::from_f64_lossy(self.momentum);
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                for ch in 0..c {
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (T::one() - m) * *rm + m * mean[ch];
                    let rv = &mut self.running_var.value[ch];
                    *rv = (T::one() - m) * *rv + m * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.value.clone(), self.running_var.value.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for i in 0..x.n() {
            let src = x.item(i);
            let xh = xhat.item_mut(i);
            for ch in 0..c {
                for (d, &s) in xh[ch * plane..(ch + 1) * plane].iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                    *d = (s - mean[ch]) * inv_std[ch];
                }
            }
            let out = y.item_mut(i);
            let xh = xhat.item(i);
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for (d, &s) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(&xh[ch * plane..(ch + 1) * plane]) {
                    *d = g * s + b;
                }
            }
        }
        self.cache = Some(NormCache {
            xhat,
            inv_std,
            batch_stats: matches!(mode, Mode::Train),
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("batchnorm backward without forward");
        let c = self.channels();
        let plane = dy.plane();
        let count = T::from_usize(dy.n() * plane).unwrap();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for i in 0..dy.n() {
            let (g, xh) = (dy.item(i), cache.xhat.item(i));
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for (&a, &b) in g[r.clone()].iter().zip(&xh[r]) {
                    sum_dy[ch] += a;
                    sum_dy_xhat[ch] += a * b;
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch];
            self.beta.grad[ch] += sum_dy[ch];
        }
        let mut dx = Tensor::zeros(dy.shape());
        for i in 0..dy.n() {
            let g = dy.item(i);
            let xh = cache.xhat.item(i);
            let out = dx.item_mut(i);
            for ch in 0..c {
                let scale = self.gamma.value[ch] * cache.inv_std[ch];
                let r = ch * plane..(ch + 1) * plane;
                if cache.batch_stats {
                    let mean_dy = sum_dy[ch] / count;
                    let mean_dy_xhat = sum_dy_xhat[ch] / count;
                    for ((d, &a), &b) in out[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                        *d = scale * (a - mean_dy - b * mean_dy_xhat);
                    }
                } else {
                    for (d, &a) in out[r.clone()].iter_mut().zip(&g[r]) {
                        *d = scale * a;
                    }
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
