//! Semantic feature extractor over densified `L × 224 × 224` score tensors.

use rand::Rng;
use semattn_nn::layers::{ConvSpec, MaxPool2d};
use semattn_nn::{join, Buffer, Mode, Module, Param, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, ConvBn, ResNet, ResNetSpec};
use crate::cham::{Cham, ReductionRule};
use crate::error::{Error, Result};
use crate::rgb_branch::BRANCH_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticBackbone {
    /// Four 3×3 stride-2 conv blocks and a 2×2 max-pool.
    Conv4,
    /// Three 5×5 conv blocks with strides 4, 2, 2 and a 2×2 max-pool.
    Conv3,
    /// An 18-layer residual trunk taking `L` input channels.
    Resnet18Style,
}

impl SemanticBackbone {
    pub const ALL: [SemanticBackbone; 3] = [SemanticBackbone::Conv4, SemanticBackbone::Conv3, SemanticBackbone::Resnet18Style];

    pub fn name(self) -> &'static str {
        match self {
            SemanticBackbone::Conv4 => "conv4",
            SemanticBackbone::Conv3 => "conv3",
            SemanticBackbone::Resnet18Style => "resnet18_style",
        }
    }

    /// Narrow plans for desk-scale experiments.
    pub fn tiny_plan(self) -> Vec<usize> {
        match self {
            SemanticBackbone::Conv4 => vec![8, 16, 32, 64],
            SemanticBackbone::Conv3 => vec![12, 24, 48],
            SemanticBackbone::Resnet18Style => vec![8, 16, 32, 64],
        }
    }

    pub fn default_plan(self) -> Vec<usize> {
        match self {
            SemanticBackbone::Conv4 => vec![128, 256, 320, 512],
            SemanticBackbone::Conv3 => vec![176, 352, 512],
            SemanticBackbone::Resnet18Style => vec![64, 128, 256, 512],
        }
    }

    fn geometry(self) -> Option<(usize, [usize; 4], usize)> {
        match self {
            SemanticBackbone::Conv4 => Some((3, [2, 2, 2, 2], 1)),
            SemanticBackbone::Conv3 => Some((5, [4, 2, 2, 0], 2)),
            SemanticBackbone::Resnet18Style => None,
        }
    }
}

impl std::str::FromStr for SemanticBackbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::config("semantic.backbone", format!("expected conv4, conv3 or resnet18_style, got `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticBranchConfig {
    pub backbone: SemanticBackbone,
    pub use_cham: bool,
    /// Output channels per block (per stage for the residual trunk); empty
    /// selects the backbone's default plan.
    pub channel_plan: Vec<usize>,
    pub num_semantic_classes: usize,
    pub cham_reduction: ReductionRule,
}

impl SemanticBranchConfig {
    pub fn new(num_semantic_classes: usize) -> Self {
        Self {
            backbone: SemanticBackbone::Conv4,
            use_cham: true,
            channel_plan: Vec::new(),
            num_semantic_classes,
            cham_reduction: ReductionRule::default(),
        }
    }

    /// Conv4 at small widths for desk-scale runs.
    pub fn tiny(num_semantic_classes: usize) -> Self {
        Self {
            channel_plan: SemanticBackbone::Conv4.tiny_plan(),
            ..Self::new(num_semantic_classes)
        }
    }

    pub fn plan(&self) -> Vec<usize> {
        if self.channel_plan.is_empty() {
            self.backbone.default_plan()
        } else {
            self.channel_plan.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_semantic_classes == 0 {
            return Err(Error::config("semantic.num_semantic_classes", "must be at least 1"));
        }
        let plan = self.plan();
        let expected = match self.backbone {
            SemanticBackbone::Conv3 => 3,
            _ => 4,
        };
        if plan.len() != expected || plan.contains(&0) {
            return Err(Error::config(
                "semantic.channel_plan",
                format!("{:?} needs {expected} nonzero widths, got {plan:?}", self.backbone),
            ));
        }
        if self.backbone == SemanticBackbone::Resnet18Style && plan.iter().enumerate().any(|(i, &w)| w != plan[0] << i) {
            return Err(Error::config("semantic.channel_plan", "residual stage widths must double"));
        }
        if self.use_cham {
            for &c in &plan[..3] {
                let r = self.cham_reduction.for_channels(c);
                if r == 0 || c % r != 0 {
                    return Err(Error::config(
                        "semantic.cham_reduction",
                        format!("ratio {r} does not divide {c} channels"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn resnet_spec(&self) -> ResNetSpec {
        let plan = self.plan();
        let trunk = plan[3];
        ResNetSpec {
            in_channels: self.num_semantic_classes,
            kind: BlockKind::Basic,
            blocks_per_stage: [2, 2, 2, 2],
            base_width: plan[0],
            cham: self.use_cham.then_some(self.cham_reduction),
            adapter_to: (trunk != BRANCH_CHANNELS).then_some(BRANCH_CHANNELS),
        }
    }

    fn conv_specs(&self) -> Vec<ConvSpec> {
        let (kernel, strides, padding) = self.backbone.geometry().expect("plain backbone");
        let mut in_ch = self.num_semantic_classes;
        self.plan()
            .iter()
            .zip(strides)
            .map(|(&out, stride)| {
                let s = ConvSpec::new(in_ch, out, kernel).stride(stride).padding(padding);
                in_ch = out;
                s
            })
            .collect()
    }

    /// Exact learnable scalar count, computed without building the network.
    pub fn count_parameters(&self) -> Result<usize> {
        self.validate()?;
        if self.backbone == SemanticBackbone::Resnet18Style {
            return Ok(self.resnet_spec().num_parameters());
        }
        let plan = self.plan();
        let convs: usize = self.conv_specs().into_iter().map(ConvBn::<f32>::num_parameters_for).sum();
        let chams: usize = if self.use_cham {
            plan[..3]
                .iter()
                .map(|&c| Cham::<f32>::num_parameters_for(c, self.cham_reduction.for_channels(c)))
                .sum()
        } else {
            0
        };
        let last = *plan.last().unwrap();
        let adapter = if last != BRANCH_CHANNELS {
            ConvBn::<f32>::num_parameters_for(ConvSpec::new(last, BRANCH_CHANNELS, 1))
        } else {
            0
        };
        Ok(convs + chams + adapter)
    }
}

/// Plain convolutional trunk with channel attention after blocks 1–3.
#[derive(Clone, Debug)]
pub struct PlainTrunk<T> {
    pub blocks: Vec<ConvBn<T>>,
    pub chams: Vec<Cham<T>>,
    pool: MaxPool2d,
    pub adapter: Option<ConvBn<T>>,
}

#[derive(Clone, Debug)]
pub enum SemanticTrunk<T> {
    Plain(PlainTrunk<T>),
    Residual(ResNet<T>),
}

/// `L × 224 × 224 → 512 × 7 × 7` feature extractor.
#[derive(Clone, Debug)]
pub struct SemanticBranch<T> {
    pub config: SemanticBranchConfig,
    pub trunk: SemanticTrunk<T>,
}

impl<T: Scalar> SemanticBranch<T> {
    pub fn new(config: SemanticBranchConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let trunk = match config.backbone {
            SemanticBackbone::Resnet18Style => SemanticTrunk::Residual(ResNet::new(config.resnet_spec(), rng)?),
            _ => {
                let specs = config.conv_specs();
                let mut blocks = Vec::new();
                let mut chams = Vec::new();
                for (i, spec) in specs.iter().enumerate() {
                    blocks.push(ConvBn::new(*spec, true, rng));
                    if config.use_cham && i < 3 {
                        let c = spec.out_channels;
                        chams.push(Cham::new(c, config.cham_reduction.for_channels(c), rng)?);
                    }
                }
                let last = specs.last().unwrap().out_channels;
                let adapter =
                    (last != BRANCH_CHANNELS).then(|| ConvBn::new(ConvSpec::new(last, BRANCH_CHANNELS, 1), true, rng));
                SemanticTrunk::Plain(PlainTrunk {
                    blocks,
                    chams,
                    pool: MaxPool2d::new(2, 2, 0),
                    adapter,
                })
            }
        };
        Ok(Self { config, trunk })
    }

    pub fn out_channels(&self) -> usize {
        BRANCH_CHANNELS
    }

    /// Every channel-attention block, in forward order.
    pub fn chams_mut(&mut self) -> &mut [Cham<T>] {
        match &mut self.trunk {
            SemanticTrunk::Plain(p) => &mut p.chams,
            SemanticTrunk::Residual(r) => &mut r.chams,
        }
    }

    pub fn forward(&mut self, m: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if m.c() != self.config.num_semantic_classes {
            return Err(Error::shape(
                "semantic branch input channels",
                self.config.num_semantic_classes,
                m.c(),
            ));
        }
        Ok(match &mut self.trunk {
            SemanticTrunk::Residual(r) => r.forward(m, mode),
            SemanticTrunk::Plain(p) => {
                let mut y = m.clone();
                for (i, b) in p.blocks.iter_mut().enumerate() {
                    y = b.forward(&y, mode);
                    if let Some(c) = p.chams.get_mut(i) {
                        y = c.forward(&y);
                    }
                }
                y = p.pool.forward(&y);
                match &mut p.adapter {
                    Some(a) => a.forward(&y, mode),
                    None => y,
                }
            }
        })
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match &mut self.trunk {
            SemanticTrunk::Residual(r) => r.backward(dy),
            SemanticTrunk::Plain(p) => {
                let mut d = match &mut p.adapter {
                    Some(a) => a.backward(dy),
                    None => dy.clone(),
                };
                d = p.pool.backward(&d);
                for (i, b) in p.blocks.iter_mut().enumerate().rev() {
                    if let Some(c) = p.chams.get_mut(i) {
                        d = c.backward(&d);
                    }
                    d = b.backward(&d);
                }
                d
            }
        }
    }
}

impl<T: Scalar> Module<T> for SemanticBranch<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match &mut self.trunk {
            SemanticTrunk::Residual(r) => r.visit_params(prefix, f),
            SemanticTrunk::Plain(p) => {
                for (i, b) in p.blocks.iter_mut().enumerate() {
                    b.visit_params(&join(prefix, &format!("block{}", i + 1)), f);
                }
                for (i, c) in p.chams.iter_mut().enumerate() {
                    c.visit_params(&join(prefix, &format!("cham{}", i + 1)), f);
                }
                if let Some(a) = &mut p.adapter {
                    a.visit_params(&join(prefix, "adapter"), f);
                }
            }
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        match &mut self.trunk {
            SemanticTrunk::Residual(r) => r.visit_buffers(prefix, f),
            SemanticTrunk::Plain(p) => {
                for (i, b) in p.blocks.iter_mut().enumerate() {
                    b.visit_buffers(&join(prefix, &format!("block{}", i + 1)), f);
                }
                if let Some(a) = &mut p.adapter {
                    a.visit_buffers(&join(prefix, "adapter"), f);
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

    /// Oracle: conv weights k²·in·out plus two BN scalars per output channel.
    fn conv_bn(k: usize, i: usize, o: usize) -> usize {
        k * k * i * o + 2 * o
    }

    #[test]
    fn default_budgets() {
        let conv4 = SemanticBranchConfig::new(150);
        let expected = conv_bn(3, 150, 128)
            + conv_bn(3, 128, 256)
            + conv_bn(3, 256, 320)
            + conv_bn(3, 320, 512)
            + 2 * 128 * 8
            + 2 * 256 * 16
            + 2 * 320 * 20;
        let n = conv4.count_parameters().unwrap();
        assert_eq!(n, expected);
        assert!((n as f64 - 2.6e6).abs() / 2.6e6 < 0.15, "{n}");

        let conv3 = SemanticBranchConfig {
            backbone: SemanticBackbone::Conv3,
            ..SemanticBranchConfig::new(150)
        };
        let n = conv3.count_parameters().unwrap();
        assert!((n as f64 - 6.5e6).abs() / 6.5e6 < 0.15, "{n}");
    }

    #[test]
    fn doubling_channels_roughly_quadruples_conv_weights() {
        let base = SemanticBranchConfig {
            use_cham: false,
            channel_plan: vec![64, 128, 256, 512],
            ..SemanticBranchConfig::new(150)
        };
        let doubled = SemanticBranchConfig {
            channel_plan: vec![128, 256, 512, 1024],
            ..base.clone()
        };
        let conv_only = |c: &SemanticBranchConfig| -> usize {
            c.conv_specs().iter().map(|s| s.no_bias().num_parameters()).sum()
        };
        let ratio = conv_only(&doubled) as f64 / conv_only(&base) as f64;
        assert!((3.6..=4.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn built_counts_match_closed_form() {
        for backbone in [SemanticBackbone::Conv4, SemanticBackbone::Conv3, SemanticBackbone::Resnet18Style] {
            let cfg = SemanticBranchConfig {
                backbone,
                channel_plan: match backbone {
                    SemanticBackbone::Conv3 => vec![8, 16, 32],
                    _ => vec![8, 16, 32, 64],
                },
                ..SemanticBranchConfig::new(6)
            };
            let mut b = SemanticBranch::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(b.num_parameters(), cfg.count_parameters().unwrap(), "{backbone:?}");
        }
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let bad = SemanticBranchConfig {
            channel_plan: vec![8, 16, 32],
            ..SemanticBranchConfig::new(6)
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let bad = SemanticBranchConfig {
            cham_reduction: ReductionRule(Some(3)),
            ..SemanticBranchConfig::tiny(6)
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }
}
