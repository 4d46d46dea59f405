//! Two-stage training: each branch with its own temporary head, then the
//! attention module over frozen branches.

pub mod checkpoint;
pub mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semattn_nn::functional::{nll_loss, nll_loss_backward};
use semattn_nn::{Mode, Scalar, Tensor};
use serde::{Deserialize, Serialize};

pub use checkpoint::{model_digest, Blob, Checkpoint, CheckpointHeader, FORMAT_VERSION, VELOCITY_PREFIX};
pub use optim::{sgd_momentum_step, step_decay, Optimizer, OptimizerKind, SgdMomentum};

use crate::data::batch::Batch;
use crate::data::dataset::Sample;
use crate::data::transform::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, mean_class_accuracy, top_k_accuracy, ModelPredictor, PredictionRecord, Protocol};
use crate::fusion::FusionConfig;
use crate::model::{ModelConfig, Pathway, SceneNet, FUSION, RGB, RGB_HEAD, SEMANTIC, SEMANTIC_HEAD};
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[serde(alias = "rgb")]
    BranchRgb,
    #[serde(alias = "semantic")]
    BranchSemantic,
    Fusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::BranchRgb => "branch_rgb",
            Stage::BranchSemantic => "branch_semantic",
            Stage::Fusion => "fusion",
        }
    }

    pub fn pathway(self) -> Pathway {
        match self {
            Stage::BranchRgb => Pathway::Rgb,
            Stage::BranchSemantic => Pathway::Semantic,
            Stage::Fusion => Pathway::Fused,
        }
    }

    /// Components whose parameters this stage updates.
    pub fn trainable(self) -> &'static [&'static str] {
        match self {
            Stage::BranchRgb => &[RGB, RGB_HEAD],
            Stage::BranchSemantic => &[SEMANTIC, SEMANTIC_HEAD],
            Stage::Fusion => &[FUSION],
        }
    }

    /// Components written to this stage's checkpoint.
    pub fn saved(self) -> &'static [&'static str] {
        match self {
            Stage::Fusion => &[RGB, RGB_HEAD, SEMANTIC, SEMANTIC_HEAD, FUSION],
            other => other.trainable(),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" | "branch_rgb" => Ok(Stage::BranchRgb),
            "semantic" | "branch_semantic" => Ok(Stage::BranchSemantic),
            "fusion" => Ok(Stage::Fusion),
            other => Err(Error::config("train.stage", format!("expected rgb, semantic or fusion, got `{other}`"))),
        }
    }
}

/// Optimization settings for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Multiply the learning rate by `lr_gamma` every this many epochs (0: never).
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Evaluate on the validation split every this many epochs; the final
    /// epoch is always evaluated when a validation split is given.
    pub val_interval: usize,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 30,
            lr_step_epochs: 15,
            lr_gamma: 0.1,
            optimizer: OptimizerKind::SgdMomentum,
            seed: 0,
            augment: AugmentConfig::default(),
            val_interval: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("train.weight_decay", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay(self.learning_rate, self.lr_gamma, self.lr_step_epochs, epoch)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub mca: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

/// Training and optional validation samples (as loaded, before cropping).
#[derive(Clone, Copy)]
pub struct StageData<'a> {
    pub train: &'a [Sample],
    pub val: Option<&'a [Sample]>,
}

/// Checkpoints a stage may start from.
#[derive(Clone, Copy, Default)]
pub struct Dependencies<'a> {
    pub rgb: Option<&'a Checkpoint>,
    pub semantic: Option<&'a Checkpoint>,
    pub resume: Option<&'a Checkpoint>,
}

pub struct TrainOutcome {
    pub model: SceneNet<f32>,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Train one stage to completion.
///
/// The fusion stage loads both branch checkpoints, trains a freshly
/// initialized attention module and verifies afterwards that every branch
/// tensor is bit-identical to its checkpoint.
pub fn train_stage(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: StageData<'_>,
    deps: Dependencies<'_>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if cfg.stage == Stage::Fusion {
        let mut out = train_fusion_variants(model_cfg, &[model_cfg.fusion.clone()], cfg, data, deps, on_epoch)?;
        return Ok(out.remove(0));
    }
    cfg.validate()?;
    let mut model = SceneNet::new(model_cfg.clone(), cfg.seed)?;
    let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay);
    let start = resume_into(&mut model, &mut opt, cfg, deps.resume)?;
    let mut runs = vec![Run::new(model, opt)];
    let history = run_epochs(&mut runs, cfg, data, start, on_epoch)?;
    let mut run = runs.remove(0);
    let checkpoint = snapshot(&mut run, cfg, model_cfg)?;
    Ok(TrainOutcome {
        model: run.model,
        checkpoint,
        history,
    })
}

/// Train several attention modules over the same frozen branches in one
/// pass: every variant sees the same batches and augmentations, and branch
/// features are computed once per batch.
pub fn train_fusion_variants(
    model_cfg: &ModelConfig,
    variants: &[FusionConfig],
    cfg: &TrainConfig,
    data: StageData<'_>,
    deps: Dependencies<'_>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    if cfg.stage != Stage::Fusion {
        return Err(Error::config("train.stage", "fusion variants need the fusion stage"));
    }
    let rgb_ck = deps
        .rgb
        .ok_or_else(|| Error::Dependency("fusion stage needs an RGB branch checkpoint".into()))?;
    let sem_ck = deps
        .semantic
        .ok_or_else(|| Error::Dependency("fusion stage needs a semantic branch checkpoint".into()))?;
    check_branch_checkpoint(rgb_ck, Stage::BranchRgb, model_cfg)?;
    check_branch_checkpoint(sem_ck, Stage::BranchSemantic, model_cfg)?;
    let frozen_rgb = rgb_ck.digest(&[RGB, RGB_HEAD]);
    let frozen_sem = sem_ck.digest(&[SEMANTIC, SEMANTIC_HEAD]);

    let mut runs = Vec::with_capacity(variants.len());
    let mut start = 1;
    for fusion in variants {
        let cfg_v = ModelConfig {
            fusion: fusion.clone(),
            ..model_cfg.clone()
        };
        let mut model = SceneNet::new(cfg_v, cfg.seed)?;
        rgb_ck.restore(&mut model, &[RGB, RGB_HEAD])?;
        sem_ck.restore(&mut model, &[SEMANTIC, SEMANTIC_HEAD])?;
        let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay);
        start = resume_into(&mut model, &mut opt, cfg, deps.resume)?;
        runs.push(Run::new(model, opt));
    }
    let history = run_epochs(&mut runs, cfg, data, start, on_epoch)?;

    let mut out = Vec::with_capacity(runs.len());
    for mut run in runs {
        for (components, expected, what) in [
            (&[RGB, RGB_HEAD][..], &frozen_rgb, "RGB branch"),
            (&[SEMANTIC, SEMANTIC_HEAD][..], &frozen_sem, "semantic branch"),
        ] {
            if &model_digest(&mut run.model, components) != expected {
                return Err(Error::FrozenParameterChanged(format!("{what} differs from its checkpoint")));
            }
        }
        let mcfg = run.model.config.clone();
        let checkpoint = snapshot(&mut run, cfg, &mcfg)?;
        out.push(TrainOutcome {
            model: run.model,
            checkpoint,
            history: history.clone(),
        });
    }
    Ok(out)
}

fn check_branch_checkpoint(ck: &Checkpoint, stage: Stage, model_cfg: &ModelConfig) -> Result<()> {
    if ck.header.stage != stage {
        return Err(Error::Dependency(format!(
            "expected a {} checkpoint, got {}",
            stage.name(),
            ck.header.stage.name()
        )));
    }
    let theirs = &ck.header.model_config;
    let matches = match stage {
        Stage::BranchRgb => theirs.rgb == model_cfg.rgb,
        _ => theirs.semantic == model_cfg.semantic,
    };
    if !matches || theirs.num_scene_classes() != model_cfg.num_scene_classes() {
        return Err(Error::config(
            "model",
            format!("{} checkpoint was trained with a different branch configuration", stage.name()),
        ));
    }
    Ok(())
}

/// Load trainable tensors and optimizer state; returns the first epoch to run.
fn resume_into(model: &mut SceneNet<f32>, opt: &mut SgdMomentum<f32>, cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<usize> {
    let Some(ck) = resume else {
        return Ok(1);
    };
    if ck.header.stage != cfg.stage {
        return Err(Error::config(
            "resume",
            format!("checkpoint stage {} does not match {}", ck.header.stage.name(), cfg.stage.name()),
        ));
    }
    ck.restore(model, cfg.stage.trainable())?;
    for (name, blob) in &ck.blobs {
        if let Some(param) = name.strip_prefix(VELOCITY_PREFIX) {
            opt.load_state(param, blob.values());
        }
    }
    Ok(ck.header.epoch + 1)
}

fn snapshot(run: &mut Run, cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<Checkpoint> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model_config: model_cfg.clone(),
        stage: cfg.stage,
        epoch: cfg.max_epochs,
        seed: cfg.seed,
        train_config: Some(cfg.clone()),
    };
    let mut ck = Checkpoint::capture(&mut run.model, cfg.stage.saved(), header);
    for (name, v) in run.opt.state() {
        ck.blobs
            .insert(format!("{VELOCITY_PREFIX}{name}"), Blob::from_values(vec![v.len()], &v));
    }
    Ok(ck)
}

struct Run {
    model: SceneNet<f32>,
    opt: SgdMomentum<f32>,
    loss_sum: f64,
    records: Vec<PredictionRecord>,
}

impl Run {
    fn new(model: SceneNet<f32>, opt: SgdMomentum<f32>) -> Self {
        Self {
            model,
            opt,
            loss_sum: 0.0,
            records: Vec::new(),
        }
    }

    /// Loss, backward and update for one batch; features are given for the
    /// fused pathway and computed here otherwise.
    fn step(
        &mut self,
        batch: &Batch<f32>,
        features: Option<(&Tensor<f32>, &Tensor<f32>)>,
        cfg: &TrainConfig,
        lr: f64,
        context: &str,
    ) -> Result<()> {
        let stage = cfg.stage;
        let trainable = stage.trainable();
        self.model.visit_params_of(trainable, &mut |_, p| p.zero_grad());
        let log_probs = match features {
            Some((f_i, f_m)) => self.model.attention.forward(f_i, f_m, Mode::Train)?,
            None => self.model.forward(batch, stage.pathway(), Mode::Train)?,
        };
        let loss = nll_loss(&log_probs, &batch.labels);
        if !loss.is_finite() || !log_probs.all_finite() {
            return Err(Error::NonFinite(format!(
                "{} loss at {context} (samples {})",
                stage.name(),
                batch.ids.join(", ")
            )));
        }
        self.model
            .backward(stage.pathway(), &nll_loss_backward(&log_probs, &batch.labels), stage != Stage::Fusion);
        let opt = &mut self.opt;
        self.model.visit_params_of(trainable, &mut |name, p| opt.step(name, p, lr));
        self.loss_sum += f64::from(loss) * batch.len() as f64;
        for (i, row) in log_probs.data().chunks_exact(log_probs.item_len()).enumerate() {
            self.records.push(PredictionRecord {
                sample_id: batch.ids[i].clone(),
                log_probs: row.iter().map(|v| v.as_f64()).collect(),
                target: batch.labels[i],
            });
        }
        Ok(())
    }
}

fn run_epochs(
    runs: &mut [Run],
    cfg: &TrainConfig,
    data: StageData<'_>,
    start_epoch: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if data.train.is_empty() {
        return Err(Error::range("training set", "no samples"));
    }
    let k = runs[0].model.config.num_scene_classes();
    let clock = Instant::now();
    let mut history = Vec::new();
    for epoch in start_epoch..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[&"shuffle", &epoch])));
        for run in runs.iter_mut() {
            run.loss_sum = 0.0;
            run.records.clear();
        }
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let s = &data.train[i];
                    augment(s, derive_seed(cfg.seed, &[&"augment", &epoch, &s.id]), &cfg.augment)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::<f32>::from_samples(&samples)?;
            let context = format!("epoch {epoch}, batch {b}");
            if cfg.stage == Stage::Fusion {
                let f_i = runs[0].model.rgb_features(&batch, Mode::Eval)?;
                let f_m = runs[0].model.semantic_features(&batch, Mode::Eval)?;
                for (v, run) in runs.iter_mut().enumerate() {
                    run.model
                        .attention
                        .reseed_dropout(derive_seed(cfg.seed, &[&"dropout", &epoch, &b, &v]));
                    run.step(&batch, Some((&f_i, &f_m)), cfg, lr, &context)?;
                }
            } else {
                runs[0].step(&batch, None, cfg, lr, &context)?;
            }
        }
        let elapsed = clock.elapsed().as_secs_f64();
        for run in runs.iter_mut() {
            let line = EpochLog {
                epoch,
                split: "train".into(),
                loss: run.loss_sum / data.train.len() as f64,
                top1: top_k_accuracy(&run.records, 1)?,
                mca: mean_class_accuracy(&run.records, k)?,
                lr,
                wall_time_s: elapsed,
            };
            on_epoch(&line);
            history.push(line);
        }
        let due = epoch == cfg.max_epochs || (cfg.val_interval > 0 && epoch % cfg.val_interval == 0);
        if let (Some(val), true) = (data.val, due) {
            for run in runs.iter_mut() {
                let mut predictor = ModelPredictor {
                    model: &mut run.model,
                    pathway: cfg.stage.pathway(),
                };
                let (records, report) = evaluate(&mut predictor, val, Protocol::Single, cfg.batch_size)?;
                let loss = records.iter().map(|r| -r.log_probs[r.target]).sum::<f64>() / records.len() as f64;
                let line = EpochLog {
                    epoch,
                    split: "val".into(),
                    loss,
                    top1: report.top1,
                    mca: report.mca,
                    lr,
                    wall_time_s: clock.elapsed().as_secs_f64(),
                };
                on_epoch(&line);
                history.push(line);
            }
        }
    }
    Ok(history)
}
