//! The full two-branch network and its declarative configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semattn_nn::layers::Linear;
use semattn_nn::{Buffer, Mode, Module, Param, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::batch::Batch;
use crate::error::{Error, Result};
use crate::fusion::{AttentionModule, BranchHead, FusionConfig, ShapeTrace};
use crate::rgb_branch::{RgbBranch, RgbBranchConfig};
use crate::semantic_branch::{SemanticBranch, SemanticBranchConfig};
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub rgb: RgbBranchConfig,
    pub semantic: SemanticBranchConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    /// Residual18 + conv4 + two 3×3 adapters into a gated Hadamard product.
    pub fn full(num_scene_classes: usize, num_semantic_classes: usize) -> Self {
        Self {
            rgb: RgbBranchConfig::default(),
            semantic: SemanticBranchConfig::new(num_semantic_classes),
            fusion: FusionConfig::new(num_scene_classes),
        }
    }

    /// Same topology at widths that train in minutes on one CPU core.
    pub fn tiny(num_scene_classes: usize, num_semantic_classes: usize) -> Self {
        Self {
            rgb: RgbBranchConfig::tiny(),
            semantic: SemanticBranchConfig::tiny(num_semantic_classes),
            fusion: FusionConfig {
                hidden_channels: 32,
                out_channels: 64,
                ..FusionConfig::new(num_scene_classes)
            },
        }
    }

    pub fn num_scene_classes(&self) -> usize {
        self.fusion.num_scene_classes
    }

    pub fn num_semantic_classes(&self) -> usize {
        self.semantic.num_semantic_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.rgb.resnet_spec()?;
        self.semantic.validate()?;
        self.fusion.validate()
    }
}

/// Which classifier produces the prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    /// RGB branch with its standalone head.
    Rgb,
    /// Semantic branch with its standalone head.
    Semantic,
    /// Both branches through the attention module.
    Fused,
}

impl Pathway {
    pub fn name(self) -> &'static str {
        match self {
            Pathway::Rgb => "rgb",
            Pathway::Semantic => "semantic",
            Pathway::Fused => "fused",
        }
    }
}

impl std::str::FromStr for Pathway {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Pathway::Rgb),
            "semantic" => Ok(Pathway::Semantic),
            "fused" => Ok(Pathway::Fused),
            other => Err(Error::config("pathway", format!("expected rgb, semantic or fused, got `{other}`"))),
        }
    }
}

/// Parameter-path prefixes of the model's components.
pub const RGB: &str = "rgb";
pub const RGB_HEAD: &str = "rgb_head";
pub const SEMANTIC: &str = "semantic";
pub const SEMANTIC_HEAD: &str = "semantic_head";
pub const FUSION: &str = "fusion";

/// RGB and semantic branches, their standalone heads and the attention module.
#[derive(Clone, Debug)]
pub struct SceneNet<T> {
    pub config: ModelConfig,
    pub rgb: RgbBranch<T>,
    pub semantic: SemanticBranch<T>,
    pub rgb_head: BranchHead<T>,
    pub semantic_head: BranchHead<T>,
    pub attention: AttentionModule<T>,
}

impl<T: Scalar> SceneNet<T> {
    /// Each component draws from its own stream derived from `seed`, so
    /// re-initializing one never perturbs another.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = |part: &str| ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&"init", &part]));
        let k = config.num_scene_classes();
        let rgb = RgbBranch::new(config.rgb.clone(), &mut rng(RGB))?;
        let semantic = SemanticBranch::new(config.semantic.clone(), &mut rng(SEMANTIC))?;
        let rgb_head = BranchHead::new(rgb.out_channels(), k, &mut rng(RGB_HEAD));
        let semantic_head = BranchHead::new(semantic.out_channels(), k, &mut rng(SEMANTIC_HEAD));
        let attention = AttentionModule::new(
            config.fusion.clone(),
            rgb.out_channels(),
            semantic.out_channels(),
            &mut rng(FUSION),
        )?;
        Ok(Self {
            config,
            rgb,
            semantic,
            rgb_head,
            semantic_head,
            attention,
        })
    }

    /// Fresh attention-module parameters drawn from `seed`.
    pub fn reinit_attention(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&"init", &FUSION]));
        self.attention = AttentionModule::new(
            self.config.fusion.clone(),
            self.rgb.out_channels(),
            self.semantic.out_channels(),
            &mut rng,
        )?;
        Ok(())
    }

    pub fn rgb_features(&mut self, batch: &Batch<T>, mode: Mode) -> Result<Tensor<T>> {
        self.rgb.forward(&batch.rgb, mode).map_err(|e| e.in_stage("rgb_branch"))
    }

    pub fn semantic_features(&mut self, batch: &Batch<T>, mode: Mode) -> Result<Tensor<T>> {
        self.semantic
            .forward(&batch.semantics, mode)
            .map_err(|e| e.in_stage("semantic_branch"))
    }

    /// Log-probabilities `N × K × 1 × 1` along `pathway`.
    ///
    /// `branch_mode` governs the branches and `mode` the head (dropout); the
    /// two differ while training the attention module over frozen branches.
    pub fn forward_with(&mut self, batch: &Batch<T>, pathway: Pathway, branch_mode: Mode, mode: Mode) -> Result<Tensor<T>> {
        match pathway {
            Pathway::Rgb => {
                let f = self.rgb_features(batch, branch_mode)?;
                Ok(self.rgb_head.forward(&f))
            }
            Pathway::Semantic => {
                let f = self.semantic_features(batch, branch_mode)?;
                Ok(self.semantic_head.forward(&f))
            }
            Pathway::Fused => {
                let f_i = self.rgb_features(batch, branch_mode)?;
                let f_m = self.semantic_features(batch, branch_mode)?;
                self.attention
                    .forward(&f_i, &f_m, mode)
                    .map_err(|e| e.in_stage("attention_module"))
            }
        }
    }

    pub fn forward(&mut self, batch: &Batch<T>, pathway: Pathway, mode: Mode) -> Result<Tensor<T>> {
        self.forward_with(batch, pathway, mode, mode)
    }

    /// Backpropagate `dL/d log_probs` from the last forward along `pathway`.
    /// With `into_branches == false` the fused pathway stops at the
    /// attention module and branch gradients stay untouched.
    pub fn backward(&mut self, pathway: Pathway, d_log_probs: &Tensor<T>, into_branches: bool) {
        match pathway {
            Pathway::Rgb => {
                let d = self.rgb_head.backward(d_log_probs);
                self.rgb.backward(&d);
            }
            Pathway::Semantic => {
                let d = self.semantic_head.backward(d_log_probs);
                self.semantic.backward(&d);
            }
            Pathway::Fused => {
                let (d_i, d_m) = self.attention.backward(d_log_probs);
                if into_branches {
                    self.rgb.backward(&d_i);
                    self.semantic.backward(&d_m);
                }
            }
        }
    }

    /// Pre-pool features feeding `pathway`'s classifier, in eval mode.
    pub fn cam_features(&mut self, batch: &Batch<T>, pathway: Pathway) -> Result<Tensor<T>> {
        match pathway {
            Pathway::Rgb => self.rgb_features(batch, Mode::Eval),
            Pathway::Semantic => self.semantic_features(batch, Mode::Eval),
            Pathway::Fused => {
                let f_i = self.rgb_features(batch, Mode::Eval)?;
                let f_m = self.semantic_features(batch, Mode::Eval)?;
                self.attention.fused_features(&f_i, &f_m)
            }
        }
    }

    /// Eval-mode log-probabilities from features returned by [`Self::cam_features`].
    pub fn classify_features(&mut self, pathway: Pathway, f: &Tensor<T>) -> Tensor<T> {
        match pathway {
            Pathway::Rgb => self.rgb_head.forward(f),
            Pathway::Semantic => self.semantic_head.forward(f),
            Pathway::Fused => self.attention.classify(f, Mode::Eval),
        }
    }

    pub fn classifier(&self, pathway: Pathway) -> &Linear<T> {
        match pathway {
            Pathway::Rgb => &self.rgb_head.linear,
            Pathway::Semantic => &self.semantic_head.linear,
            Pathway::Fused => &self.attention.classifier,
        }
    }

    /// Named tensor shapes of the last fused forward pass.
    pub fn trace(&self) -> &ShapeTrace {
        &self.attention.trace
    }

    /// Visit only the components whose prefix is in `prefixes`.
    pub fn visit_params_of(&mut self, prefixes: &[&str], f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for &p in prefixes {
            match p {
                RGB => self.rgb.visit_params(RGB, f),
                RGB_HEAD => self.rgb_head.visit_params(RGB_HEAD, f),
                SEMANTIC => self.semantic.visit_params(SEMANTIC, f),
                SEMANTIC_HEAD => self.semantic_head.visit_params(SEMANTIC_HEAD, f),
                FUSION => self.attention.visit_params(FUSION, f),
                _ => {}
            }
        }
    }

    pub fn visit_buffers_of(&mut self, prefixes: &[&str], f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        for &p in prefixes {
            match p {
                RGB => self.rgb.visit_buffers(RGB, f),
                SEMANTIC => self.semantic.visit_buffers(SEMANTIC, f),
                _ => {}
            }
        }
    }
}

pub const ALL_COMPONENTS: [&str; 5] = [RGB, RGB_HEAD, SEMANTIC, SEMANTIC_HEAD, FUSION];

impl<T: Scalar> Module<T> for SceneNet<T> {
    fn visit_params(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.visit_params_of(&ALL_COMPONENTS, f);
    }

    fn visit_buffers(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        self.visit_buffers_of(&ALL_COMPONENTS, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_are_independently_seeded() {
        let cfg = ModelConfig::tiny(3, 5);
        let mut a = SceneNet::<f32>::new(cfg.clone(), 1).unwrap();
        let mut b = SceneNet::<f32>::new(cfg, 1).unwrap();
        b.reinit_attention(2).unwrap();
        let collect = |m: &mut SceneNet<f32>, prefix: &str| {
            let mut v = Vec::new();
            m.visit_params_of(&[prefix], &mut |_, p| v.extend_from_slice(&p.value));
            v
        };
        assert_eq!(collect(&mut a, RGB), collect(&mut b, RGB));
        assert_ne!(collect(&mut a, FUSION), collect(&mut b, FUSION));
        b.reinit_attention(1).unwrap();
        assert_eq!(collect(&mut a, FUSION), collect(&mut b, FUSION));
    }

    #[test]
    fn wrong_semantic_channels_are_tagged() {
        let mut m = SceneNet::<f32>::new(ModelConfig::tiny(3, 5), 0).unwrap();
        let batch = Batch {
            rgb: Tensor::zeros([1, 3, 32, 32]),
            semantics: Tensor::zeros([1, 4, 32, 32]),
            labels: vec![0],
            ids: vec!["x".into()],
        };
        let err = m.forward(&batch, Pathway::Fused, Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "semantic_branch", .. }), "{err}");
    }
}
