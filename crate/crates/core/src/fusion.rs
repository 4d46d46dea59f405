//! Attention module: adapts both branch outputs, combines them with one of
//! five mechanisms and classifies the result into `K` log-probabilities.

use rand::Rng;
use semattn_nn::functional::{log_softmax, log_softmax_backward};
use semattn_nn::layers::{global_avg_pool, global_avg_pool_backward, Conv2d, ConvSpec, Dropout, Linear, Relu, Sigmoid};
use semattn_nn::{join, Mode, Module, Param, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How adapted RGB and semantic features are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// `F_IA + F_MA`, no sigmoid on either side.
    Additive,
    /// Channel concatenation, doubling the fused width.
    Concat,
    /// `F_IA ⊙ F_MA`, no sigmoid.
    Hadamard,
    /// ReLU-adapted RGB gated by sigmoid-adapted semantics.
    #[serde(rename = "g_rgb_h", alias = "gated_rgb_hadamard")]
    GatedRgbHadamard,
    /// Sigmoid-adapted RGB gating ReLU-adapted semantics.
    #[serde(rename = "g_sem_h", alias = "gated_sem_hadamard")]
    GatedSemHadamard,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Additive,
        Mechanism::Concat,
        Mechanism::Hadamard,
        Mechanism::GatedRgbHadamard,
        Mechanism::GatedSemHadamard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Additive => "additive",
            Mechanism::Concat => "concat",
            Mechanism::Hadamard => "hadamard",
            Mechanism::GatedRgbHadamard => "g_rgb_h",
            Mechanism::GatedSemHadamard => "g_sem_h",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated_rgb_hadamard" => return Ok(Mechanism::GatedRgbHadamard),
            "gated_sem_hadamard" => return Ok(Mechanism::GatedSemHadamard),
            _ => {}
        }
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("fusion.mechanism", format!("unknown mechanism `{s}`")))
    }
}

/// Depth and kernel of the convolutions adapting each branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvPlan {
    None,
    #[serde(rename = "two_1x1")]
    Two1x1,
    #[serde(rename = "two_3x3")]
    Two3x3,
    #[serde(rename = "three_3x3")]
    Three3x3,
}

impl ConvPlan {
    pub const ALL: [ConvPlan; 4] = [ConvPlan::None, ConvPlan::Two1x1, ConvPlan::Two3x3, ConvPlan::Three3x3];

    pub fn name(self) -> &'static str {
        match self {
            ConvPlan::None => "none",
            ConvPlan::Two1x1 => "two_1x1",
            ConvPlan::Two3x3 => "two_3x3",
            ConvPlan::Three3x3 => "three_3x3",
        }
    }

    /// `(kernel, layer count)`; zero layers for `none`.
    pub fn layers(self) -> (usize, usize) {
        match self {
            ConvPlan::None => (1, 0),
            ConvPlan::Two1x1 => (1, 2),
            ConvPlan::Two3x3 => (3, 2),
            ConvPlan::Three3x3 => (3, 3),
        }
    }
}

impl std::str::FromStr for ConvPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("fusion.conv_plan", format!("unknown plan `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub mechanism: Mechanism,
    pub conv_plan: ConvPlan,
    pub dropout_p: f64,
    pub num_scene_classes: usize,
    /// Width of every adapter layer but the last.
    pub hidden_channels: usize,
    /// Width of the adapted features `F_IA`, `F_MA`.
    pub out_channels: usize,
}

impl FusionConfig {
    pub fn new(num_scene_classes: usize) -> Self {
        Self {
            mechanism: Mechanism::GatedRgbHadamard,
            conv_plan: ConvPlan::Two3x3,
            dropout_p: 0.5,
            num_scene_classes,
            hidden_channels: 512,
            out_channels: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scene_classes < 2 {
            return Err(Error::config("fusion.num_scene_classes", "need at least 2 scene classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("fusion.dropout_p", format!("{} not in [0, 1)", self.dropout_p)));
        }
        if self.hidden_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("fusion.out_channels", "adapter widths must be positive"));
        }
        Ok(())
    }

    fn adapter_specs(&self, in_channels: usize) -> Vec<ConvSpec> {
        let (kernel, n) = self.conv_plan.layers();
        (0..n)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { self.hidden_channels };
                let cout = if i + 1 == n { self.out_channels } else { self.hidden_channels };
                ConvSpec::new(cin, cout, kernel)
            })
            .collect()
    }

    /// Channels of `F_A` for the given branch widths.
    pub fn fused_channels(&self, rgb_channels: usize, semantic_channels: usize) -> usize {
        let (a, b) = match self.conv_plan {
            ConvPlan::None => (rgb_channels, semantic_channels),
            _ => (self.out_channels, self.out_channels),
        };
        match self.mechanism {
            Mechanism::Concat => a + b,
            _ => a,
        }
    }

    pub fn count_parameters(&self, rgb_channels: usize, semantic_channels: usize) -> usize {
        let adapters: usize = self
            .adapter_specs(rgb_channels)
            .iter()
            .chain(&self.adapter_specs(semantic_channels))
            .map(|s| s.num_parameters())
            .sum();
        adapters + (self.fused_channels(rgb_channels, semantic_channels) + 1) * self.num_scene_classes
    }
}

/// Nonlinearity closing a gating adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateActivation {
    Sigmoid,
    /// Test hook turning a gated mechanism into its ungated counterpart.
    Identity,
}

/// Stack of bias-carrying convolutions, each followed by ReLU, optionally
/// closed by a gate activation.
#[derive(Clone, Debug)]
pub struct Adapter<T> {
    pub convs: Vec<Conv2d<T>>,
    relus: Vec<Relu>,
    gate: Option<(GateActivation, Sigmoid<T>)>,
}

impl<T: Scalar> Adapter<T> {
    fn new(specs: Vec<ConvSpec>, gated: bool, rng: &mut impl Rng) -> Self {
        Self {
            relus: specs.iter().map(|_| Relu::new()).collect(),
            convs: specs.into_iter().map(|s| Conv2d::new(s, rng)).collect(),
            gate: gated.then(|| (GateActivation::Sigmoid, Sigmoid::new())),
        }
    }

    pub fn is_gated(&self) -> bool {
        self.gate.is_some()
    }

    /// Forward, recording each intermediate shape into `trace`.
    fn forward(&mut self, x: &Tensor<T>, names: &str, trace: &mut Vec<(String, [usize; 4])>) -> Tensor<T> {
        let mut y = x.clone();
        for (i, (conv, relu)) in self.convs.iter_mut().zip(&mut self.relus).enumerate() {
            y = relu.forward(&conv.forward(&y));
            let tag = if i == 0 { String::new() } else { (i + 1).to_string() };
            trace.push((format!("att_conv{tag}_{names}"), y.shape()));
        }
        match &mut self.gate {
            Some((GateActivation::Sigmoid, s)) => s.forward(&y),
            _ => y,
        }
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = match &mut self.gate {
            Some((GateActivation::Sigmoid, s)) => s.backward(dy),
            _ => dy.clone(),
        };
        for (conv, relu) in self.convs.iter_mut().zip(&mut self.relus).rev() {
            d = conv.backward(&relu.backward(&d));
        }
        d
    }
}

impl<T: Scalar> Module<T> for Adapter<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_params(&join(prefix, &format!("conv{}", i + 1)), f);
        }
    }
}

/// Named tensor shapes observed during the last forward pass.
pub type ShapeTrace = Vec<(String, [usize; 4])>;

#[derive(Clone, Debug)]
struct FusionCache<T> {
    f_ia: Tensor<T>,
    f_ma: Tensor<T>,
    fused_shape: [usize; 4],
    log_probs: Tensor<T>,
}

/// Adapters, fusion and the scene classifier.
#[derive(Clone, Debug)]
pub struct AttentionModule<T> {
    pub config: FusionConfig,
    pub rgb_adapter: Adapter<T>,
    pub semantic_adapter: Adapter<T>,
    pub classifier: Linear<T>,
    pub dropout: Dropout,
    pub trace: ShapeTrace,
    cache: Option<FusionCache<T>>,
}

impl<T: Scalar> AttentionModule<T> {
    pub fn new(config: FusionConfig, rgb_channels: usize, semantic_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ungated_concat = matches!(config.mechanism, Mechanism::Concat);
        if config.conv_plan == ConvPlan::None && !ungated_concat && rgb_channels != semantic_channels {
            return Err(Error::config(
                "fusion.conv_plan",
                format!("`none` needs equal branch widths, got {rgb_channels} and {semantic_channels}"),
            ));
        }
        let rgb_adapter = Adapter::new(
            config.adapter_specs(rgb_channels),
            config.mechanism == Mechanism::GatedSemHadamard,
            rng,
        );
        let semantic_adapter = Adapter::new(
            config.adapter_specs(semantic_channels),
            config.mechanism == Mechanism::GatedRgbHadamard,
            rng,
        );
        let classifier = Linear::new(
            config.fused_channels(rgb_channels, semantic_channels),
            config.num_scene_classes,
            true,
            rng,
        );
        let dropout = Dropout::new(config.dropout_p, rng.random());
        Ok(Self {
            config,
            rgb_adapter,
            semantic_adapter,
            classifier,
            dropout,
            trace: Vec::new(),
            cache: None,
        })
    }

    /// Replace the gate sigmoid by the identity on whichever side is gated.
    pub fn set_gate_activation(&mut self, act: GateActivation) {
        for a in [&mut self.rgb_adapter, &mut self.semantic_adapter] {
            if let Some(g) = &mut a.gate {
                g.0 = act;
            }
        }
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout.reseed(seed);
    }

    /// `F_A` from the two branch outputs, recording shapes.
    pub fn fused_features(&mut self, f_i: &Tensor<T>, f_m: &Tensor<T>) -> Result<Tensor<T>> {
        if f_i.n() != f_m.n() || (f_i.h(), f_i.w()) != (f_m.h(), f_m.w()) {
            return Err(Error::shape(
                "fusion inputs",
                format!("{:?}", f_i.shape()),
                format!("{:?}", f_m.shape()),
            ));
        }
        let expect_in = |a: &Adapter<T>, t: &Tensor<T>, what: &str| -> Result<()> {
            match a.convs.first() {
                Some(c) if c.spec.in_channels != t.c() => {
                    Err(Error::shape(format!("{what} adapter input"), c.spec.in_channels, t.c()))
                }
                _ => Ok(()),
            }
        };
        expect_in(&self.rgb_adapter, f_i, "rgb")?;
        expect_in(&self.semantic_adapter, f_m, "semantic")?;
        let (mut h, mut w) = (f_i.h(), f_i.w());
        for c in &self.rgb_adapter.convs {
            (h, w) = c
                .spec
                .output_size(h, w)
                .ok_or_else(|| Error::shape("fusion spatial size", "room for the adapter kernels", format!("{}x{}", f_i.h(), f_i.w())))?;
        }
        let mut trace = vec![("rgb_branch".to_string(), f_i.shape()), ("semantic_branch".to_string(), f_m.shape())];
        let f_ia = self.rgb_adapter.forward(f_i, "I", &mut trace);
        let f_ma = self.semantic_adapter.forward(f_m, "M", &mut trace);
        if self.config.mechanism != Mechanism::Concat && f_ia.shape() != f_ma.shape() {
            return Err(Error::shape(
                "fusion operands",
                format!("{:?}", f_ia.shape()),
                format!("{:?}", f_ma.shape()),
            ));
        }
        let fused = fuse(&f_ia, &f_ma, self.config.mechanism);
        trace.push(("attention".to_string(), fused.shape()));
        self.trace = trace;
        self.cache = Some(FusionCache {
            fused_shape: fused.shape(),
            f_ia,
            f_ma,
            log_probs: Tensor::zeros([0, 0, 0, 0]),
        });
        Ok(fused)
    }

    /// Pool, dropout, affine map and log-softmax.
    pub fn classify(&mut self, f_a: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let pooled = global_avg_pool(f_a);
        let logits = self.classifier.forward(&self.dropout.forward(&pooled, mode));
        let log_probs = log_softmax(&logits);
        self.trace.push(("avg_pool".to_string(), pooled.shape()));
        self.trace.push(("classifier".to_string(), log_probs.shape()));
        if let Some(c) = &mut self.cache {
            c.log_probs = log_probs.clone();
            c.fused_shape = f_a.shape();
        }
        log_probs
    }

    pub fn forward(&mut self, f_i: &Tensor<T>, f_m: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let f_a = self.fused_features(f_i, f_m)?;
        Ok(self.classify(&f_a, mode))
    }

    /// Given `dL/d log_probs`, accumulate parameter gradients and return
    /// `(dL/dF_I, dL/dF_M)`.
    pub fn backward(&mut self, d_log_probs: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let cache = self.cache.take().expect("fusion backward without forward");
        let d_logits = log_softmax_backward(&cache.log_probs, d_log_probs);
        let d_pooled = self.dropout.backward(&self.classifier.backward(&d_logits));
        let d_fused = global_avg_pool_backward(&d_pooled, cache.fused_shape);
        let (d_ia, d_ma) = match self.config.mechanism {
            Mechanism::Additive => (d_fused.clone(), d_fused),
            Mechanism::Concat => d_fused.split_channels(cache.f_ia.c()),
            _ => (
                d_fused.zip_map(&cache.f_ma, |g, b| g * b),
                d_fused.zip_map(&cache.f_ia, |g, a| g * a),
            ),
        };
        (self.rgb_adapter.backward(&d_ia), self.semantic_adapter.backward(&d_ma))
    }
}

/// Combine adapted features according to `mechanism`.
pub fn fuse<T: Scalar>(f_ia: &Tensor<T>, f_ma: &Tensor<T>, mechanism: Mechanism) -> Tensor<T> {
    match mechanism {
        Mechanism::Additive => f_ia.zip_map(f_ma, |a, b| a + b),
        Mechanism::Concat => Tensor::concat_channels(f_ia, f_ma),
        _ => f_ia.zip_map(f_ma, |a, b| a * b),
    }
}

impl<T: Scalar> Module<T> for AttentionModule<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.rgb_adapter.visit_params(&join(prefix, "adapter_rgb"), f);
        self.semantic_adapter.visit_params(&join(prefix, "adapter_sem"), f);
        self.classifier.visit_params(&join(prefix, "classifier"), f);
    }
}

/// Temporary per-branch classifier: global average pool, affine, log-softmax.
#[derive(Clone, Debug)]
pub struct BranchHead<T> {
    pub linear: Linear<T>,
    cache: Option<([usize; 4], Tensor<T>)>,
}

impl<T: Scalar> BranchHead<T> {
    pub fn new(in_channels: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(in_channels, num_classes, true, rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, f: &Tensor<T>) -> Tensor<T> {
        let log_probs = log_softmax(&self.linear.forward(&global_avg_pool(f)));
        self.cache = Some((f.shape(), log_probs.clone()));
        log_probs
    }

    pub fn backward(&mut self, d_log_probs: &Tensor<T>) -> Tensor<T> {
        let (shape, lp) = self.cache.take().expect("head backward without forward");
        let d = self.linear.backward(&log_softmax_backward(&lp, d_log_probs));
        global_avg_pool_backward(&d, shape)
    }
}

impl<T: Scalar> Module<T> for BranchHead<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.linear.visit_params(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn small(mechanism: Mechanism, plan: ConvPlan) -> FusionConfig {
        FusionConfig {
            mechanism,
            conv_plan: plan,
            hidden_channels: 6,
            out_channels: 10,
            ..FusionConfig::new(3)
        }
    }

    fn zero_params(m: &mut impl Module<f64>, prefix: &str) {
        m.visit_params("", &mut |name, p| {
            if name.starts_with(prefix) {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        });
    }

    #[test]
    fn default_plan_shapes() {
        let mut m = AttentionModule::<f32>::new(FusionConfig::new(5), 512, 512, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = Tensor::<f32>::zeros([1, 512, 7, 7]);
        let lp = m.forward(&f, &f, Mode::Eval).unwrap();
        assert_eq!(lp.shape(), [1, 5, 1, 1]);
        let shapes: Vec<_> = m.trace.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        assert_eq!(
            shapes,
            vec![
                ("rgb_branch", [1, 512, 7, 7]),
                ("semantic_branch", [1, 512, 7, 7]),
                ("att_conv_I", [1, 512, 5, 5]),
                ("att_conv2_I", [1, 1024, 3, 3]),
                ("att_conv_M", [1, 512, 5, 5]),
                ("att_conv2_M", [1, 1024, 3, 3]),
                ("attention", [1, 1024, 3, 3]),
                ("avg_pool", [1, 1024, 1, 1]),
                ("classifier", [1, 5, 1, 1]),
            ]
        );
    }

    #[test]
    fn zero_semantic_adapter_gives_half_gate() {
        let mut m = AttentionModule::new(small(Mechanism::GatedRgbHadamard, ConvPlan::Two3x3), 4, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        zero_params(&mut m, "adapter_sem");
        let (f_i, f_m) = (random([2, 4, 7, 7], 2), random([2, 4, 7, 7], 3));
        let f_a = m.fused_features(&f_i, &f_m).unwrap();
        let mut trace = Vec::new();
        let f_ia = m.rgb_adapter.forward(&f_i, "I", &mut trace);
        assert_eq!(f_a, f_ia.map(|v| 0.5 * v));
        let f_ma = m.semantic_adapter.forward(&f_m, "M", &mut trace);
        assert!(f_ma.data().iter().all(|&v| v == 0.5));
        assert!(f_ia.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_rgb_adapter_is_zero() {
        let mut m = AttentionModule::new(small(Mechanism::GatedRgbHadamard, ConvPlan::Two3x3), 4, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        zero_params(&mut m, "adapter_rgb");
        let f_ia = m.rgb_adapter.forward(&random([1, 4, 7, 7], 2), "I", &mut Vec::new());
        assert!(f_ia.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn additive_identity_and_concat_width() {
        let a = random([1, 3, 2, 2], 4);
        let zero = Tensor::zeros(a.shape());
        assert_eq!(fuse(&a, &zero, Mechanism::Additive), a);
        assert_eq!(fuse(&a, &a, Mechanism::Concat).c(), 6);
        assert_eq!(FusionConfig::new(3).fused_channels(512, 512), 1024);
        let concat = FusionConfig {
            mechanism: Mechanism::Concat,
            ..FusionConfig::new(3)
        };
        assert_eq!(concat.fused_channels(512, 512), 2048);
    }

    #[test]
    fn gate_bounds_rgb_magnitude() {
        let mut m = AttentionModule::new(small(Mechanism::GatedRgbHadamard, ConvPlan::Two3x3), 4, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (f_i, f_m) = (random([2, 4, 7, 7], 6), random([2, 4, 7, 7], 7));
        let f_a = m.fused_features(&f_i, &f_m).unwrap();
        let f_ia = m.rgb_adapter.forward(&f_i, "I", &mut Vec::new());
        for (a, i) in f_a.data().iter().zip(f_ia.data()) {
            assert!(a.abs() <= i.abs());
        }
    }

    #[test]
    fn identity_gate_equals_hadamard() {
        let seed = 11;
        let mut gated = AttentionModule::new(small(Mechanism::GatedRgbHadamard, ConvPlan::Two3x3), 4, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut plain = AttentionModule::new(small(Mechanism::Hadamard, ConvPlan::Two3x3), 4, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        gated.set_gate_activation(GateActivation::Identity);
        let (f_i, f_m) = (random([2, 4, 7, 7], 8), random([2, 4, 7, 7], 9));
        assert_eq!(gated.forward(&f_i, &f_m, Mode::Eval).unwrap(), plain.forward(&f_i, &f_m, Mode::Eval).unwrap());
    }

    #[test]
    fn classify_hand_values_and_shift_invariance() {
        let mut m = AttentionModule::<f64>::new(small(Mechanism::Additive, ConvPlan::None), 1, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.config.num_scene_classes = 2;
        m.classifier = Linear::from_values(1, 2, vec![0.0, 0.0], Some(vec![1.0, 0.0]));
        let f = Tensor::zeros([1, 1, 3, 3]);
        let lp = m.classify(&f, Mode::Eval);
        let base = (1.0 + (-1.0f64).exp()).ln();
        assert!((lp.data()[0] + base).abs() < 1e-12);
        assert!((lp.data()[1] + 1.0 + base).abs() < 1e-12);
        assert!((-0.3133 - lp.data()[0]).abs() < 1e-4);

        let f = random([2, 1, 3, 3], 3);
        let before = m.classify(&f, Mode::Eval);
        m.classifier.bias.as_mut().unwrap().value.iter_mut().for_each(|b| *b += 7.5);
        let after = m.classify(&f, Mode::Eval);
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let total: f64 = after.item(0).iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn eval_dropout_is_deterministic() {
        let mut m = AttentionModule::new(small(Mechanism::GatedRgbHadamard, ConvPlan::Two1x1), 4, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (f_i, f_m) = (random([1, 4, 7, 7], 1), random([1, 4, 7, 7], 2));
        assert_eq!(m.forward(&f_i, &f_m, Mode::Eval).unwrap(), m.forward(&f_i, &f_m, Mode::Eval).unwrap());
    }

    #[test]
    fn plan_geometry() {
        let f = random([1, 4, 7, 7], 1);
        for (plan, side) in [(ConvPlan::None, 7), (ConvPlan::Two1x1, 7), (ConvPlan::Two3x3, 3), (ConvPlan::Three3x3, 1)] {
            for mech in Mechanism::ALL {
                let mut m = AttentionModule::new(small(mech, plan), 4, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
                let f_a = m.fused_features(&f, &f).unwrap();
                assert_eq!((f_a.h(), f_a.w()), (side, side), "{plan:?} {mech:?}");
                let width = if plan == ConvPlan::None { 4 } else { 10 };
                let expect = if mech == Mechanism::Concat { 2 * width } else { width };
                assert_eq!(f_a.c(), expect);
                assert_eq!(m.num_parameters(), m.config.count_parameters(4, 4));
            }
        }
        assert!(matches!(FusionConfig::new(1).validate(), Err(Error::Config { .. })));
        assert!(AttentionModule::<f32>::new(small(Mechanism::Hadamard, ConvPlan::None), 4, 8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for mech in Mechanism::ALL {
            let mut m = AttentionModule::new(small(mech, ConvPlan::Two3x3), 3, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let (f_i, f_m) = (random([2, 3, 7, 7], 5), random([2, 3, 7, 7], 6));
            let targets = [0usize, 2];
            let loss = |m: &mut AttentionModule<f64>, a: &Tensor<f64>, b: &Tensor<f64>| {
                semattn_nn::functional::nll_loss(&m.forward(a, b, Mode::Eval).unwrap(), &targets)
            };
            let lp = m.forward(&f_i, &f_m, Mode::Eval).unwrap();
            let (di, dm) = m.backward(&semattn_nn::functional::nll_loss_backward(&lp, &targets));
            let eps = 1e-6;
            for (which, grad) in [(0, &di), (1, &dm)] {
                for idx in (0..grad.len()).step_by(7) {
                    let mut a = f_i.clone();
                    let mut b = f_m.clone();
                    let t = if which == 0 { &mut a } else { &mut b };
                    t.data_mut()[idx] += eps;
                    let up = loss(&mut m, &a, &b);
                    let t = if which == 0 { &mut a } else { &mut b };
                    t.data_mut()[idx] -= 2.0 * eps;
                    let down = loss(&mut m, &a, &b);
                    let num = (up - down) / (2.0 * eps);
                    let an = grad.data()[idx];
                    assert!((an - num).abs() <= 1e-6 + 1e-4 * num.abs(), "{mech:?} input {which}[{idx}]: {an} vs {num}");
                }
            }
        }
    }
}
