//! RGB feature extractor: residual trunks of depth 18 or 50.
//!
//! Parameter names follow the `layer{stage}.{block}.conv{k}` convention of
//! common residual-network checkpoints (`stem` for the first convolution,
//! `downsample` for projection shortcuts, `bn.gamma`/`bn.beta` for the affine
//! normalization parameters), so external weights can be imported by
//! renaming keys.

use rand::Rng;
use semattn_nn::{Buffer, Mode, Module, Param, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, ResNet, ResNetSpec};
use crate::error::{Error, Result};

/// Channel count every branch hands to the fusion module (residual50 excepted).
pub const BRANCH_CHANNELS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RgbBackbone {
    Residual18,
    Residual50,
    /// Residual18 topology at reduced width with a 1×1 adapter to 512 channels.
    TinyResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RgbBranchConfig {
    pub backbone: RgbBackbone,
    /// Scales every stage width; `tiny_residual` uses 1/8.
    pub width_multiplier: f64,
}

impl Default for RgbBranchConfig {
    fn default() -> Self {
        Self {
            backbone: RgbBackbone::Residual18,
            width_multiplier: 1.0,
        }
    }
}

impl RgbBranchConfig {
    pub fn tiny() -> Self {
        Self {
            backbone: RgbBackbone::TinyResidual,
            width_multiplier: 0.125,
        }
    }

    pub fn resnet_spec(&self) -> Result<ResNetSpec> {
        let m = self.width_multiplier;
        if !(m.is_finite() && m > 0.0) || (64.0 * m).round() < 1.0 {
            return Err(Error::config("rgb.width_multiplier", format!("{m} gives an empty first stage")));
        }
        let base_width = (64.0 * m).round() as usize;
        let (kind, blocks_per_stage) = match self.backbone {
            RgbBackbone::Residual18 | RgbBackbone::TinyResidual => (BlockKind::Basic, [2, 2, 2, 2]),
            RgbBackbone::Residual50 => (BlockKind::Bottleneck, [3, 4, 6, 3]),
        };
        let trunk = (base_width << 3) * kind.expansion();
        let adapter_to = (kind == BlockKind::Basic && trunk != BRANCH_CHANNELS).then_some(BRANCH_CHANNELS);
        Ok(ResNetSpec {
            in_channels: 3,
            kind,
            blocks_per_stage,
            base_width,
            cham: None,
            adapter_to,
        })
    }

    pub fn out_channels(&self) -> Result<usize> {
        Ok(self.resnet_spec()?.out_channels())
    }

    pub fn count_parameters(&self) -> Result<usize> {
        Ok(self.resnet_spec()?.num_parameters())
    }
}

/// `3 × 224 × 224 → C × 7 × 7` feature extractor.
#[derive(Clone, Debug)]
pub struct RgbBranch<T> {
    pub config: RgbBranchConfig,
    pub net: ResNet<T>,
}

impl<T: Scalar> RgbBranch<T> {
    pub fn new(config: RgbBranchConfig, rng: &mut impl Rng) -> Result<Self> {
        let net = ResNet::new(config.resnet_spec()?, rng)?;
        Ok(Self { config, net })
    }

    pub fn out_channels(&self) -> usize {
        self.net.spec.out_channels()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.c() != 3 {
            return Err(Error::shape("rgb branch input channels", 3, x.c()));
        }
        Ok(self.net.forward(x, mode))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.net.backward(dy)
    }
}

impl<T: Scalar> Module<T> for RgbBranch<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.net.visit_params(prefix, f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        self.net.visit_buffers(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_counts() {
        let r18 = RgbBranchConfig::default().count_parameters().unwrap();
        // conv/bn trunk of an 18-layer residual net without its classifier
        assert_eq!(r18, 11_176_512);
        assert!((r18 as f64 - 12e6).abs() / 12e6 < 0.15);
        let tiny = RgbBranchConfig::tiny();
        assert_eq!(tiny.resnet_spec().unwrap().trunk_channels(), 64);
        assert_eq!(tiny.out_channels().unwrap(), 512);
        let r50 = RgbBranchConfig {
            backbone: RgbBackbone::Residual50,
            width_multiplier: 1.0,
        };
        assert_eq!(r50.out_channels().unwrap(), 2048);
        assert_eq!(r50.count_parameters().unwrap(), 23_508_032);
    }

    #[test]
    fn built_count_matches_closed_form() {
        let cfg = RgbBranchConfig::tiny();
        let mut b = RgbBranch::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.num_parameters(), cfg.count_parameters().unwrap());
    }

    #[test]
    fn rejects_wrong_channels_and_bad_width() {
        let mut b = RgbBranch::<f32>::new(RgbBranchConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros([1, 4, 32, 32]);
        assert!(matches!(b.forward(&x, Mode::Eval), Err(Error::Shape { .. })));
        let bad = RgbBranchConfig {
            width_multiplier: 0.001,
            ..RgbBranchConfig::tiny()
        };
        assert!(matches!(bad.resnet_spec(), Err(Error::Config { .. })));
    }
}
