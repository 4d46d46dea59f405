//! Channel attention: a per-channel sigmoid gate computed from average- and
//! max-pooled statistics through a shared bias-free bottleneck.

use rand::Rng;
use serde::{Deserialize, Serialize};
use semattn_nn::layers::sigmoid;
use semattn_nn::{init, join, Module, Param, ParamKind, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;

/// Reduction ratio used when none is configured.
pub fn default_reduction(channels: usize) -> usize {
    if channels >= 16 {
        16
    } else {
        1
    }
}

/// Reduction ratio setting: a fixed `r`, or `None` for [`default_reduction`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionRule(pub Option<usize>);

impl ReductionRule {
    pub fn for_channels(self, channels: usize) -> usize {
        self.0.unwrap_or_else(|| default_reduction(channels))
    }
}

/// Per-channel gate `σ(W2·relu(W1·avg) + W2·relu(W1·max))`.
///
/// `w1` is `(c/r) × c` and `w2` is `c × (c/r)`, both row-major.
pub fn channel_attention_map<T: Scalar>(f: &FeatureMap<T>, w1: &[T], w2: &[T]) -> Result<Vec<T>> {
    let c = f.channels;
    let hidden = w1.len() / c;
    if w1.len() != hidden * c || w2.len() != c * hidden || hidden == 0 {
        return Err(Error::shape(
            "channel attention weights",
            format!("(h x {c}) and ({c} x h)"),
            format!("{} and {} values", w1.len(), w2.len()),
        ));
    }
    if !f.all_finite() {
        return Err(Error::NonFinite("channel attention input".into()));
    }
    let (avg, max) = pooled(f);
    let z = bottleneck(&avg, w1, w2, hidden)
        .into_iter()
        .zip(bottleneck(&max, w1, w2, hidden))
        .map(|(a, b)| a + b);
    let gate: Vec<T> = z.map(sigmoid).collect();
    if gate.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("channel attention gate".into()));
    }
    Ok(gate)
}

/// `out[c, i, j] = gate[c] · f[c, i, j]`.
pub fn apply_channel_gate<T: Scalar>(f: &FeatureMap<T>, gate: &[T]) -> Result<FeatureMap<T>> {
    if gate.len() != f.channels {
        return Err(Error::shape("channel gate", f.channels, gate.len()));
    }
    let plane = f.plane();
    let values = f
        .values
        .chunks_exact(plane)
        .zip(gate)
        .flat_map(|(ch, &g)| ch.iter().map(move |&v| g * v))
        .collect();
    FeatureMap::new(f.channels, f.height, f.width, values)
}

fn pooled<T: Scalar>(f: &FeatureMap<T>) -> (Vec<T>, Vec<T>) {
    let inv = T::one() / T::from_usize(f.plane()).unwrap();
    f.values
        .chunks_exact(f.plane())
        .map(|ch| {
            let sum: T = ch.iter().copied().sum();
            let max = ch.iter().copied().fold(T::neg_infinity(), T::max);
            (sum * inv, max)
        })
        .unzip()
}

fn bottleneck<T: Scalar>(x: &[T], w1: &[T], w2: &[T], hidden: usize) -> Vec<T> {
    let c = x.len();
    let h: Vec<T> = (0..hidden)
        .map(|j| {
            let s: T = w1[j * c..(j + 1) * c].iter().zip(x).map(|(&w, &v)| w * v).sum();
            s.max(T::zero())
        })
        .collect();
    (0..c)
        .map(|i| w2[i * hidden..(i + 1) * hidden].iter().zip(&h).map(|(&w, &v)| w * v).sum())
        .collect()
}

#[derive(Clone, Debug)]
struct ChamCache<T> {
    input: Tensor<T>,
    gates: Vec<Vec<T>>,
    /// Per item: pre-activation hidden units for the avg and max paths.
    pre: Vec<[Vec<T>; 2]>,
    pooled: Vec<[Vec<T>; 2]>,
    argmax: Vec<Vec<usize>>,
}

/// Trainable channel attention block applied to `N × C × H × W` batches.
#[derive(Clone, Debug)]
pub struct Cham<T> {
    pub channels: usize,
    pub reduction: usize,
    pub w1: Param<T>,
    pub w2: Param<T>,
    /// Test hook: when set, every gate entry is replaced by this constant.
    pub gate_override: Option<T>,
    cache: Option<ChamCache<T>>,
}

impl<T: Scalar> Cham<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeroed(channels, reduction)?;
        let hidden = m.hidden();
        m.w1.value = init::kaiming_uniform(rng, hidden * channels, channels);
        m.w2.value = init::kaiming_uniform(rng, channels * hidden, hidden);
        Ok(m)
    }

    pub fn zeroed(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(
                "cham.reduction",
                format!("ratio {reduction} does not divide {channels} channels"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            w1: Param::zeros(vec![hidden, channels], ParamKind::Weight),
            w2: Param::zeros(vec![channels, hidden], ParamKind::Weight),
            gate_override: None,
            cache: None,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn num_parameters_for(channels: usize, reduction: usize) -> usize {
        2 * channels * (channels / reduction)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c(), self.channels, "cham channels");
        let (c, plane, hidden) = (self.channels, x.plane(), self.hidden());
        let inv = T::one() / T::from_usize(plane).unwrap();
        let mut cache = ChamCache {
            input: x.clone(),
            gates: Vec::with_capacity(x.n()),
            pre: Vec::with_capacity(x.n()),
            pooled: Vec::with_capacity(x.n()),
            argmax: Vec::with_capacity(x.n()),
        };
        let mut y = Tensor::zeros(x.shape());
        for i in 0..x.n() {
            let item = x.item(i);
            let mut avg = vec![T::zero(); c];
            let mut max = vec![T::zero(); c];
            let mut arg = vec![0; c];
            for ch in 0..c {
                let s = &item[ch * plane..(ch + 1) * plane];
                avg[ch] = s.iter().copied().sum::<T>() * inv;
                let (mut best, mut idx) = (s[0], 0);
                for (k, &v) in s.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        idx = k;
                    }
                }
                max[ch] = best;
                arg[ch] = idx;
            }
            let pre_a = self.hidden_pre(&avg);
            let pre_m = self.hidden_pre(&max);
            let gate: Vec<T> = match self.gate_override {
                Some(g) => vec![g; c],
                None => {
                    let (za, zm) = (self.expand(&pre_a), self.expand(&pre_m));
                    za.iter().zip(&zm).map(|(&a, &b)| sigmoid(a + b)).collect()
                }
            };
            let out = y.item_mut(i);
            for ch in 0..c {
                for (d, &v) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(&item[ch * plane..(ch + 1) * plane]) {
                    *d = gate[ch] * v;
                }
            }
            debug_assert_eq!(pre_a.len(), hidden);
            cache.gates.push(gate);
            cache.pre.push([pre_a, pre_m]);
            cache.pooled.push([avg, max]);
            cache.argmax.push(arg);
        }
        self.cache = Some(cache);
        y
    }

    fn hidden_pre(&self, x: &[T]) -> Vec<T> {
        let c = self.channels;
        (0..self.hidden())
            .map(|j| self.w1.value[j * c..(j + 1) * c].iter().zip(x).map(|(&w, &v)| w * v).sum())
            .collect()
    }

    fn expand(&self, pre: &[T]) -> Vec<T> {
        let hidden = self.hidden();
        (0..self.channels)
            .map(|i| {
                self.w2.value[i * hidden..(i + 1) * hidden]
                    .iter()
                    .zip(pre)
                    .map(|(&w, &v)| w * v.max(T::zero()))
                    .sum()
            })
            .collect()
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("cham backward without forward");
        let (c, plane, hidden) = (self.channels, dy.plane(), self.hidden());
        let inv = T::one() / T::from_usize(plane).unwrap();
        let mut dx = Tensor::zeros(dy.shape());
        for i in 0..dy.n() {
            let (g_item, x_item) = (dy.item(i), cache.input.item(i));
            let gate = &cache.gates[i];
            let out = dx.item_mut(i);
            let mut dgate = vec![T::zero(); c];
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for ((d, &g), &v) in out[r.clone()].iter_mut().zip(&g_item[r.clone()]).zip(&x_item[r]) {
                    *d = g * gate[ch];
                    dgate[ch] += g * v;
                }
            }
            if self.gate_override.is_some() {
                continue;
            }
            // σ'(z) = g(1-g); the same dz feeds both pooled paths.
            let dz: Vec<T> = dgate.iter().zip(gate).map(|(&d, &g)| d * g * (T::one() - g)).collect();
            for path in 0..2 {
                let pre = &cache.pre[i][path];
                let pooled = &cache.pooled[i][path];
                let mut dh = vec![T::zero(); hidden];
                for ch in 0..c {
                    for j in 0..hidden {
                        let a = pre[j].max(T::zero());
                        self.w2.grad[ch * hidden + j] += dz[ch] * a;
                        dh[j] += dz[ch] * self.w2.value[ch * hidden + j];
                    }
                }
                for j in 0..hidden {
                    if pre[j] <= T::zero() {
                        dh[j] = T::zero();
                    }
                }
                let mut dpool = vec![T::zero(); c];
                for j in 0..hidden {
                    for ch in 0..c {
                        self.w1.grad[j * c + ch] += dh[j] * pooled[ch];
                        dpool[ch] += dh[j] * self.w1.value[j * c + ch];
                    }
                }
                for ch in 0..c {
                    let base = ch * plane;
                    if path == 0 {
                        let g = dpool[ch] * inv;
                        out[base..base + plane].iter_mut().for_each(|d| *d += g);
                    } else {
                        out[base + cache.argmax[i][ch]] += dpool[ch];
                    }
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Cham<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "w2"), &mut self.w2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_half_gate() {
        let f = random_map(8, 3, 3, 1);
        let gate = channel_attention_map(&f, &[0.0; 8], &[0.0; 8]).unwrap();
        assert!(gate.iter().all(|&g| g == 0.5));
    }

    #[test]
    fn single_channel_hand_value() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0f64; 4]).unwrap();
        let gate = channel_attention_map(&f, &[1.0], &[1.0]).unwrap();
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((gate[0] - expected).abs() < 1e-15);
        assert!((gate[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        let f = random_map(4, 2, 2, 2);
        assert!(matches!(channel_attention_map(&f, &[0.0; 3], &[0.0; 4]), Err(Error::Shape { .. })));
        assert!(matches!(apply_channel_gate(&f, &[1.0; 3]), Err(Error::Shape { .. })));
        let mut bad = f.clone();
        bad.values[3] = f64::NAN;
        assert!(matches!(channel_attention_map(&bad, &[0.0; 4], &[0.0; 4]), Err(Error::NonFinite(_))));
        assert!(matches!(Cham::<f64>::zeroed(12, 5), Err(Error::Config { .. })));
    }

    #[test]
    fn gate_product_matches_loop_oracle() {
        let f = random_map(5, 4, 3, 3);
        let gate = [0.1, 0.0, 1.0, 0.7, 0.33];
        let out = apply_channel_gate(&f, &gate).unwrap();
        for c in 0..5 {
            for y in 0..4 {
                for x in 0..3 {
                    let i = (c * 4 + y) * 3 + x;
                    assert_eq!(out.values[i], gate[c] * f.values[i]);
                }
            }
        }
        assert_eq!(apply_channel_gate(&f, &[1.0; 5]).unwrap(), f);
    }

    #[test]
    fn channel_permutation_equivariance() {
        let (c, hidden) = (4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_map(c, 3, 3, 5);
        let w1: Vec<f64> = (0..hidden * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..c * hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        let perm = [2, 0, 3, 1];
        let plane = 9;
        let mut fp = f.clone();
        let mut w1p = w1.clone();
        let mut w2p = w2.clone();
        for (new, &old) in perm.iter().enumerate() {
            fp.values[new * plane..(new + 1) * plane].copy_from_slice(f.channel(old));
            for j in 0..hidden {
                w1p[j * c + new] = w1[j * c + old];
            }
            w2p[new * hidden..(new + 1) * hidden].copy_from_slice(&w2[old * hidden..(old + 1) * hidden]);
        }
        let g = channel_attention_map(&f, &w1, &w2).unwrap();
        let gp = channel_attention_map(&fp, &w1p, &w2p).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!((gp[new] - g[old]).abs() < 1e-15);
        }
    }

    #[test]
    fn module_matches_pure_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = Cham::<f64>::new(16, 4, &mut rng).unwrap();
        let f = random_map(16, 3, 2, 7);
        let y = m.forward(&f.to_tensor());
        let gate = channel_attention_map(&f, &m.w1.value, &m.w2.value).unwrap();
        let expected = apply_channel_gate(&f, &gate).unwrap();
        for (a, b) in y.data().iter().zip(&expected.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(gate.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    fn param(m: &mut Cham<f64>, which: usize) -> &mut Param<f64> {
        if which == 0 {
            &mut m.w1
        } else {
            &mut m.w2
        }
    }

    /// Central differences on a 4×5×5 input, loss = Σ y ⊙ probe.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = Cham::<f64>::new(4, 2, &mut rng).unwrap();
        let x = random_map(4, 5, 5, 9).to_tensor();
        let probe: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &mut Cham<f64>, x: &Tensor<f64>| -> f64 {
            m.forward(x).data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        loss(&mut m, &x);
        let dx = m.backward(&Tensor::new(x.shape(), probe.clone()));
        let eps = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let num = (loss(&mut m, &xp) - loss(&mut m, &xm)) / (2.0 * eps);
            assert!(rel(dx.data()[idx], num) < 1e-4, "dx[{idx}] {} vs {num}", dx.data()[idx]);
        }
        for which in 0..2 {
            let n = if which == 0 { m.w1.len() } else { m.w2.len() };
            for k in 0..n {
                let analytic = param(&mut m, which).grad[k];
                param(&mut m, which).value[k] += eps;
                let up = loss(&mut m, &x);
                param(&mut m, which).value[k] -= 2.0 * eps;
                let down = loss(&mut m, &x);
                param(&mut m, which).value[k] += eps;
                let num = (up - down) / (2.0 * eps);
                assert!(rel(analytic, num) < 1e-4, "w{}[{k}] {analytic} vs {num}", which + 1);
            }
        }
    }

    #[test]
    fn forced_unit_gate_is_identity() {
        let mut m = Cham::<f64>::new(4, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.gate_override = Some(1.0);
        let x = random_map(4, 2, 2, 3).to_tensor();
        assert_eq!(m.forward(&x), x);
    }
}
