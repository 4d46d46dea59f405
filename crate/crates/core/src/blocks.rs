//! Convolutional building blocks shared by both branches.

use rand::Rng;
use semattn_nn::layers::{BatchNorm2d, Conv2d, ConvSpec, MaxPool2d, Relu};
use semattn_nn::{join, Buffer, Mode, Module, Param, Scalar, Tensor};

use crate::cham::{Cham, ReductionRule};
use crate::error::Result;

/// Bias-free convolution, batch normalization and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: Option<Relu>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(spec: ConvSpec, relu: bool, rng: &mut impl Rng) -> Self {
        Self {
            bn: BatchNorm2d::new(spec.out_channels),
            conv: Conv2d::new(spec.no_bias(), rng),
            relu: relu.then(Relu::new),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.bn.forward(&self.conv.forward(x), mode);
        match &mut self.relu {
            Some(r) => r.forward(&y),
            None => y,
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let dy = match &mut self.relu {
            Some(r) => r.backward(dy),
            None => dy.clone(),
        };
        self.conv.backward(&self.bn.backward(&dy))
    }

    pub fn num_parameters_for(spec: ConvSpec) -> usize {
        spec.no_bias().num_parameters() + 2 * spec.out_channels
    }
}

impl<T: Scalar> Module<T> for ConvBn<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }
}

/// Which residual unit a stage is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// A residual unit: `relu(main(x) + shortcut(x))`.
///
/// Basic units stack two 3×3 convolutions; bottleneck units use 1×1, 3×3,
/// 1×1 with a 4× channel expansion. The shortcut is the identity unless the
/// stride or channel count changes, in which case it is a strided 1×1
/// projection.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub main: Vec<ConvBn<T>>,
    pub shortcut: Option<ConvBn<T>>,
    relu: Relu,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(kind: BlockKind, in_ch: usize, width: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let out = width * kind.expansion();
        let main = block_specs(kind, in_ch, width, stride)
            .into_iter()
            .map(|(spec, relu)| ConvBn::new(spec, relu, rng))
            .collect();
        let shortcut =
            (stride != 1 || in_ch != out).then(|| ConvBn::new(ConvSpec::new(in_ch, out, 1).stride(stride), false, rng));
        Self {
            main,
            shortcut,
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut y = x.clone();
        for layer in &mut self.main {
            y = layer.forward(&y, mode);
        }
        match &mut self.shortcut {
            Some(s) => y.add_assign(&s.forward(x, mode)),
            None => y.add_assign(x),
        }
        self.relu.forward(&y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let dsum = self.relu.backward(dy);
        let mut dx = dsum.clone();
        for layer in self.main.iter_mut().rev() {
            dx = layer.backward(&dx);
        }
        match &mut self.shortcut {
            Some(s) => dx.add_assign(&s.backward(&dsum)),
            None => dx.add_assign(&dsum),
        }
        dx
    }

    pub fn num_parameters_for(kind: BlockKind, in_ch: usize, width: usize, stride: usize) -> usize {
        let out = width * kind.expansion();
        let main: usize = block_specs(kind, in_ch, width, stride)
            .into_iter()
            .map(|(s, _)| ConvBn::<f32>::num_parameters_for(s))
            .sum();
        let short = if stride != 1 || in_ch != out {
            ConvBn::<f32>::num_parameters_for(ConvSpec::new(in_ch, out, 1))
        } else {
            0
        };
        main + short
    }
}

fn block_specs(kind: BlockKind, in_ch: usize, width: usize, stride: usize) -> Vec<(ConvSpec, bool)> {
    match kind {
        BlockKind::Basic => vec![
            (ConvSpec::new(in_ch, width, 3).stride(stride).padding(1), true),
            (ConvSpec::new(width, width, 3).padding(1), false),
        ],
        BlockKind::Bottleneck => vec![
            (ConvSpec::new(in_ch, width, 1), true),
            (ConvSpec::new(width, width, 3).stride(stride).padding(1), true),
            (ConvSpec::new(width, width * 4, 1), false),
        ],
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.main.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("conv{}", i + 1)), f);
        }
        if let Some(s) = &mut self.shortcut {
            s.visit_params(&join(prefix, "downsample"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        for (i, l) in self.main.iter_mut().enumerate() {
            l.visit_buffers(&join(prefix, &format!("conv{}", i + 1)), f);
        }
        if let Some(s) = &mut self.shortcut {
            s.visit_buffers(&join(prefix, "downsample"), f);
        }
    }
}

/// Geometry of a residual trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNetSpec {
    pub in_channels: usize,
    pub kind: BlockKind,
    pub blocks_per_stage: [usize; 4],
    /// Width of the first stage; later stages double it.
    pub base_width: usize,
    /// Channel attention after stages 1–3.
    pub cham: Option<ReductionRule>,
    /// Project the final stage to this many channels with a 1×1 conv + BN + ReLU.
    pub adapter_to: Option<usize>,
}

impl ResNetSpec {
    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn trunk_channels(&self) -> usize {
        self.stage_width(3) * self.kind.expansion()
    }

    pub fn out_channels(&self) -> usize {
        self.adapter_to.unwrap_or(self.trunk_channels())
    }

    pub fn num_parameters(&self) -> usize {
        let mut total = ConvBn::<f32>::num_parameters_for(ConvSpec::new(self.in_channels, self.base_width, 7));
        let mut in_ch = self.base_width;
        for stage in 0..4 {
            let width = self.stage_width(stage);
            for b in 0..self.blocks_per_stage[stage] {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                total += ResidualBlock::<f32>::num_parameters_for(self.kind, in_ch, width, stride);
                in_ch = width * self.kind.expansion();
            }
            if let (Some(r), true) = (self.cham, stage < 3) {
                total += Cham::<f32>::num_parameters_for(in_ch, r.for_channels(in_ch));
            }
        }
        if let Some(out) = self.adapter_to {
            total += ConvBn::<f32>::num_parameters_for(ConvSpec::new(in_ch, out, 1));
        }
        total
    }
}

/// Residual trunk: 7×7/2 stem, 3×3/2 max-pool, four stages, optional
/// channel attention between stages and an optional 1×1 channel adapter.
#[derive(Clone, Debug)]
pub struct ResNet<T> {
    pub spec: ResNetSpec,
    pub stem: ConvBn<T>,
    pool: MaxPool2d,
    pub stages: Vec<Vec<ResidualBlock<T>>>,
    pub chams: Vec<Cham<T>>,
    pub adapter: Option<ConvBn<T>>,
}

impl<T: Scalar> ResNet<T> {
    pub fn new(spec: ResNetSpec, rng: &mut impl Rng) -> Result<Self> {
        let stem = ConvBn::new(ConvSpec::new(spec.in_channels, spec.base_width, 7).stride(2).padding(3), true, rng);
        let mut in_ch = spec.base_width;
        let mut stages = Vec::new();
        let mut chams = Vec::new();
        for stage in 0..4 {
            let width = spec.stage_width(stage);
            let mut blocks = Vec::new();
            for b in 0..spec.blocks_per_stage[stage] {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(spec.kind, in_ch, width, stride, rng));
                in_ch = width * spec.kind.expansion();
            }
            stages.push(blocks);
            if let (Some(r), true) = (spec.cham, stage < 3) {
                chams.push(Cham::new(in_ch, r.for_channels(in_ch), rng)?);
            }
        }
        let adapter = spec
            .adapter_to
            .map(|out| ConvBn::new(ConvSpec::new(in_ch, out, 1), true, rng));
        Ok(Self {
            spec,
            stem,
            pool: MaxPool2d::new(3, 2, 1),
            stages,
            chams,
            adapter,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut y = self.pool.forward(&self.stem.forward(x, mode));
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for block in stage.iter_mut() {
                y = block.forward(&y, mode);
            }
            if let Some(c) = self.chams.get_mut(s) {
                y = c.forward(&y);
            }
        }
        match &mut self.adapter {
            Some(a) => a.forward(&y, mode),
            None => y,
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = match &mut self.adapter {
            Some(a) => a.backward(dy),
            None => dy.clone(),
        };
        for (s, stage) in self.stages.iter_mut().enumerate().rev() {
            if let Some(c) = self.chams.get_mut(s) {
                d = c.backward(&d);
            }
            for block in stage.iter_mut().rev() {
                d = block.backward(&d);
            }
        }
        self.stem.backward(&self.pool.backward(&d))
    }
}

impl<T: Scalar> Module<T> for ResNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_params(&join(prefix, &format!("layer{}.{b}", s + 1)), f);
            }
        }
        for (i, c) in self.chams.iter_mut().enumerate() {
            c.visit_params(&join(prefix, &format!("cham{}", i + 1)), f);
        }
        if let Some(a) = &mut self.adapter {
            a.visit_params(&join(prefix, "adapter"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        self.stem.visit_buffers(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_buffers(&join(prefix, &format!("layer{}.{b}", s + 1)), f);
            }
        }
        if let Some(a) = &mut self.adapter {
            a.visit_buffers(&join(prefix, "adapter"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn fd_check(net: &mut ResNet<f64>, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> f64 {
        let y = net.forward(x, Mode::Train);
        let probe = random(y.shape(), rng);
        net.zero_grad();
        net.backward(&probe);
        let mut names = Vec::new();
        net.visit_params("", &mut |n, p| names.push((n.to_string(), p.grad[0], p.value[0])));
        let mut worst: f64 = 0.0;
        for (name, analytic, original) in names {
            let mut eval = |v: f64| {
                net.visit_params("", &mut |n, p| {
                    if n == name {
                        p.value[0] = v;
                    }
                });
                let y = net.forward(x, Mode::Train);
                y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let h = 1e-5;
            let numeric = (eval(original + h) - eval(original - h)) / (2.0 * h);
            eval(original);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}: analytic {analytic} numeric {numeric}");
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn residual_trunk_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ResNetSpec {
            in_channels: 3,
            kind: BlockKind::Basic,
            blocks_per_stage: [1, 1, 1, 1],
            base_width: 2,
            cham: None,
            adapter_to: Some(6),
        };
        let mut net = ResNet::<f64>::new(spec, &mut rng).unwrap();
        let x = random([2, 3, 64, 64], &mut rng);
        fd_check(&mut net, &x, &mut rng);
    }
}
