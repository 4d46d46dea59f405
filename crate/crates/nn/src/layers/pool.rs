use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max pooling; the gradient routes to the first maximal element in
/// row-major window order.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            argmax: Vec::new(),
            in_shape: [0; 4],
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (oh, ow) = self.output_size(x.h(), x.w());
        let (h, w) = (x.h(), x.w());
        let mut y = Tensor::zeros([x.n(), x.c(), oh, ow]);
        self.argmax = vec![0; y.len()];
        self.in_shape = x.shape();
        let mut out_idx = 0;
        for i in 0..x.n() {
            let item = x.item(i);
            for c in 0..x.c() {
                let base = c * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * w + ix as usize;
                                if best_idx == usize::MAX || item[idx] > best {
                                    best = item[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        y.data_mut()[out_idx] = best;
                        self.argmax[out_idx] = i * x.item_len() + best_idx;
                        out_idx += 1;
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(self.in_shape);
        for (&src, &g) in self.argmax.iter().zip(dy.data()) {
            dx.data_mut()[src] += g;
        }
        dx
    }
}

/// Spatial mean per channel: `N × C × H × W → N × C × 1 × 1`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let plane = x.plane();
    let inv = T::one() / T::from_usize(plane).unwrap();
    let data = x.data().chunks_exact(plane).map(|c| c.iter().copied().sum::<T>() * inv).collect();
    Tensor::new([x.n(), x.c(), 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let plane = in_shape[2] * in_shape[3];
    let inv = T::one() / T::from_usize(plane).unwrap();
    let mut dx = Tensor::zeros(in_shape);
    for (chunk, &g) in dx.data_mut().chunks_exact_mut(plane).zip(dy.data()) {
        chunk.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_first_maximum_on_ties() {
        let mut pool = MaxPool2d::new(2, 2, 0);
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![3., 3., 1., 3.]);
        let y = pool.forward(&x);
        assert_eq!(y.data(), &[3.]);
        let dx = pool.backward(&Tensor::new([1, 1, 1, 1], vec![1.]));
        assert_eq!(dx.data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn padded_stem_pool_shape() {
        let pool = MaxPool2d::new(3, 2, 1);
        assert_eq!(pool.output_size(112, 112), (56, 56));
        assert_eq!(MaxPool2d::new(2, 2, 0).output_size(14, 14), (7, 7));
    }

    #[test]
    fn avg_pool_roundtrip_shapes() {
        let x = Tensor::<f32>::new([1, 2, 1, 2], vec![1., 3., 5., 7.]);
        let y = global_avg_pool(&x);
        assert_eq!(y.data(), &[2., 6.]);
        let dx = global_avg_pool_backward(&y, x.shape());
        assert_eq!(dx.data(), &[1., 1., 3., 3.]);
    }
}
