//! Controlled comparisons over one design axis at a time.
//!
//! Per seed, the RGB branch is trained once and shared; each semantic
//! variant gets its own semantic branch, and all fusion variants over that
//! branch pair train together on identical batches.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::data::dataset::{semantic_subset, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, ModelPredictor, Protocol};
use crate::fusion::{ConvPlan, FusionConfig, Mechanism};
use crate::model::{ModelConfig, Pathway, SceneNet};
use crate::semantic_branch::{SemanticBackbone, SemanticBranchConfig};
use crate::training::{train_fusion_variants, train_stage, Dependencies, EpochLog, Stage, StageData, TrainConfig};
use crate::util::{atomic_write, write_json};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Mechanism,
    FusionDepth,
    SemanticBackbone,
    SemanticSubset,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Mechanism => "mechanism",
            Axis::FusionDepth => "fusion_depth",
            Axis::SemanticBackbone => "semantic_backbone",
            Axis::SemanticSubset => "semantic_subset",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Axis::Mechanism, Axis::FusionDepth, Axis::SemanticBackbone, Axis::SemanticSubset]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "axis",
                    format!("expected mechanism, fusion_depth, semantic_backbone or semantic_subset, got `{s}`"),
                )
            })
    }
}

/// A semantic branch setting: backbone plus an optional label restriction.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVariant {
    pub name: String,
    pub config: SemanticBranchConfig,
    pub subset_size: Option<usize>,
}

/// Semantic variants, each with the attention modules to train over it.
pub type Plan = Vec<(SemanticVariant, Vec<FusionConfig>)>;

/// Validation metrics of one pathway for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub seed: u64,
    /// `rgb_only`, `semantic_only/<variant>` or `fused/<variant>/<mechanism>/<plan>`.
    pub row: String,
    pub top1: f64,
    pub mca: f64,
}

pub fn fused_row(semantic: &str, fusion: &FusionConfig) -> String {
    format!("fused/{semantic}/{}/{}", fusion.mechanism.name(), fusion.conv_plan.name())
}

pub fn semantic_row(semantic: &str) -> String {
    format!("semantic_only/{semantic}")
}

pub const RGB_ROW: &str = "rgb_only";

/// Zero the scores of labels outside the seeded subset of size `n`.
pub fn restrict_samples(samples: &[Sample], n: usize, seed: u64) -> Result<Vec<Sample>> {
    let l = samples.first().map_or(0, |s| s.semantics.num_classes());
    let mut keep = vec![false; l];
    for k in semantic_subset(l, n, seed)? {
        keep[k] = true;
    }
    Ok(samples
        .iter()
        .map(|s| Sample {
            semantics: s.semantics.restrict(&keep),
            ..s.clone()
        })
        .collect())
}

fn measure(model: &mut SceneNet<f32>, pathway: Pathway, val: &[Sample], batch_size: usize, seed: u64, row: String) -> Result<Measurement> {
    let mut p = ModelPredictor { model, pathway };
    let (_, report) = evaluate(&mut p, val, Protocol::Single, batch_size)?;
    Ok(Measurement {
        seed,
        row,
        top1: report.top1,
        mca: report.mca,
    })
}

/// Train and evaluate every pathway of `plan` for one seed.
pub fn run_seed(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    plan: &Plan,
    seed: u64,
    log: &mut dyn FnMut(&str, &EpochLog),
) -> Result<Vec<Measurement>> {
    let cfg = |stage| TrainConfig {
        stage,
        seed,
        ..train_cfg.clone()
    };
    let bs = train_cfg.batch_size;
    let mut out = Vec::new();

    let rgb = train_stage(
        base,
        &cfg(Stage::BranchRgb),
        StageData { train, val: None },
        Dependencies::default(),
        &mut |l| log(RGB_ROW, l),
    )?;
    let mut rgb_model = rgb.model;
    out.push(measure(&mut rgb_model, Pathway::Rgb, val, bs, seed, RGB_ROW.into())?);

    for (variant, fusions) in plan {
        let (tr, va) = match variant.subset_size {
            Some(n) => (restrict_samples(train, n, seed)?, restrict_samples(val, n, seed)?),
            None => (train.to_vec(), val.to_vec()),
        };
        let model_cfg = ModelConfig {
            semantic: variant.config.clone(),
            ..base.clone()
        };
        let tag = semantic_row(&variant.name);
        let sem = train_stage(
            &model_cfg,
            &cfg(Stage::BranchSemantic),
            StageData { train: &tr, val: None },
            Dependencies::default(),
            &mut |l| log(&tag, l),
        )?;
        let mut sem_model = sem.model;
        out.push(measure(&mut sem_model, Pathway::Semantic, &va, bs, seed, tag.clone())?);
        if fusions.is_empty() {
            continue;
        }
        let deps = Dependencies {
            rgb: Some(&rgb.checkpoint),
            semantic: Some(&sem.checkpoint),
            resume: None,
        };
        let fused_tag = format!("fused/{}", variant.name);
        let outcomes = train_fusion_variants(
            &model_cfg,
            fusions,
            &cfg(Stage::Fusion),
            StageData { train: &tr, val: None },
            deps,
            &mut |l| log(&fused_tag, l),
        )?;
        for (fusion, mut o) in fusions.iter().zip(outcomes) {
            out.push(measure(&mut o.model, Pathway::Fused, &va, bs, seed, fused_row(&variant.name, fusion))?);
        }
    }
    Ok(out)
}

/// The plan for one ablation axis.
pub fn axis_plan(axis: Axis, base: &ModelConfig, subset_sizes: &[usize]) -> Result<Plan> {
    let default = SemanticVariant {
        name: base.semantic.backbone.name().to_string(),
        config: base.semantic.clone(),
        subset_size: None,
    };
    let with = |f: &dyn Fn(&mut FusionConfig)| {
        let mut c = base.fusion.clone();
        f(&mut c);
        c
    };
    Ok(match axis {
        Axis::Mechanism => vec![(default, Mechanism::ALL.iter().map(|&m| with(&|c| c.mechanism = m)).collect())],
        Axis::FusionDepth => vec![(default, ConvPlan::ALL.iter().map(|&p| with(&|c| c.conv_plan = p)).collect())],
        Axis::SemanticBackbone => SemanticBackbone::ALL
            .into_iter()
            .map(|b| {
                // a narrow base model compares narrow variants of every backbone
                let narrow = base.semantic.plan() == base.semantic.backbone.tiny_plan();
                let config = SemanticBranchConfig {
                    backbone: b,
                    channel_plan: if narrow { b.tiny_plan() } else { Vec::new() },
                    ..base.semantic.clone()
                };
                let variant = SemanticVariant {
                    name: b.name().to_string(),
                    config,
                    subset_size: None,
                };
                (variant, vec![base.fusion.clone()])
            })
            .collect(),
        Axis::SemanticSubset => {
            let l = base.num_semantic_classes();
            if subset_sizes.is_empty() {
                return Err(Error::config("ablate.subset_sizes", "no subset sizes given"));
            }
            subset_sizes
                .iter()
                .map(|&n| {
                    if n == 0 || n > l {
                        return Err(Error::range("semantic subset size", format!("{n} not in 1..={l}")));
                    }
                    let variant = SemanticVariant {
                        name: format!("L{n}"),
                        config: base.semantic.clone(),
                        subset_size: (n < l).then_some(n),
                    };
                    Ok((variant, vec![base.fusion.clone()]))
                })
                .collect::<Result<_>>()?
        }
    })
}

/// Mean metrics of one row over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub row: String,
    pub mean_top1: f64,
    pub mean_mca: f64,
    pub per_seed: Vec<Measurement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
}

impl AblationTable {
    /// Group measurements by row, keeping first-appearance order.
    pub fn from_measurements(axis: &str, seeds: Vec<u64>, measurements: &[Measurement]) -> Self {
        let mut rows: Vec<TableRow> = Vec::new();
        for m in measurements {
            match rows.iter_mut().find(|r| r.row == m.row) {
                Some(r) => r.per_seed.push(m.clone()),
                None => rows.push(TableRow {
                    row: m.row.clone(),
                    mean_top1: 0.0,
                    mean_mca: 0.0,
                    per_seed: vec![m.clone()],
                }),
            }
        }
        for r in &mut rows {
            let n = r.per_seed.len() as f64;
            r.mean_top1 = r.per_seed.iter().map(|m| m.top1).sum::<f64>() / n;
            r.mean_mca = r.per_seed.iter().map(|m| m.mca).sum::<f64>() / n;
        }
        Self {
            axis: axis.to_string(),
            seeds,
            rows,
        }
    }

    pub fn row(&self, name: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.row == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | Top@1 | MCA | per-seed Top@1 |\n|---|---:|---:|---|\n", self.axis);
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|m| format!("{:.1}", m.top1)).collect();
            s.push_str(&format!("| {} | {:.2} | {:.2} | {} |\n", r.row, r.mean_top1, r.mean_mca, seeds.join(", ")));
        }
        s
    }

    /// Writes `ablation_<axis>.json`, `.md` and a bar chart `.png` of mean Top@1.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = dir.join(format!("ablation_{}", self.axis));
        write_json(&stem.with_extension("json"), self)?;
        atomic_write(&stem.with_extension("md"), self.to_markdown().as_bytes())?;
        let chart = self.chart();
        let mut bytes = Vec::new();
        let png = stem.with_extension("png");
        chart
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: png.clone(),
                source: e,
            })?;
        atomic_write(&png, &bytes)
    }

    /// Vertical bars of mean Top@1 on a 0–100 scale, one per row.
    pub fn chart(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let (bar, gap, height) = (24u32, 8u32, 200u32);
        let width = (self.rows.len() as u32 * (bar + gap) + gap).max(1);
        let mut img = ImageBuffer::from_pixel(width, height, Rgb([255u8, 255, 255]));
        for (i, r) in self.rows.iter().enumerate() {
            let h = ((r.mean_top1.clamp(0.0, 100.0) / 100.0) * (height - 1) as f64).round() as u32;
            let color = match r.row.split('/').next() {
                Some("fused") => [214, 96, 77],
                Some("semantic_only") => [67, 147, 195],
                _ => [120, 120, 120],
            };
            let x0 = gap + i as u32 * (bar + gap);
            for x in x0..x0 + bar {
                for y in height - h..height {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
        }
        img
    }
}

/// Run `axis` over `seeds` on fixed data.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    axis: Axis,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    seeds: &[u64],
    subset_sizes: &[usize],
    log: &mut dyn FnMut(&str, &EpochLog),
) -> Result<AblationTable> {
    let plan = axis_plan(axis, base, subset_sizes)?;
    let mut all = Vec::new();
    for &seed in seeds {
        log::info!("{} ablation, seed {seed}", axis.name());
        all.extend(run_seed(base, train_cfg, train, val, &plan, seed, log)?);
    }
    Ok(AblationTable::from_measurements(axis.name(), seeds.to_vec(), &all))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(seed: u64, row: &str, top1: f64) -> Measurement {
        Measurement {
            seed,
            row: row.into(),
            top1,
            mca: top1 / 2.0,
        }
    }

    #[test]
    fn mechanism_plan_has_all_five() {
        let base = ModelConfig::tiny(4, 12);
        let plan = axis_plan(Axis::Mechanism, &base, &[]).unwrap();
        assert_eq!(plan.len(), 1);
        let names: Vec<&str> = plan[0].1.iter().map(|f| f.mechanism.name()).collect();
        assert_eq!(names, ["additive", "concat", "hadamard", "g_rgb_h", "g_sem_h"]);
    }

    #[test]
    fn subset_plan_validates_sizes() {
        let base = ModelConfig::tiny(4, 12);
        let plan = axis_plan(Axis::SemanticSubset, &base, &[12, 4]).unwrap();
        assert_eq!(plan[0].0.subset_size, None);
        assert_eq!(plan[1].0.subset_size, Some(4));
        assert!(axis_plan(Axis::SemanticSubset, &base, &[13]).is_err());
        assert!(axis_plan(Axis::SemanticSubset, &base, &[]).is_err());
    }

    #[test]
    fn table_means_rows_in_order() {
        let t = AblationTable::from_measurements(
            "x",
            vec![1, 2],
            &[m(1, "rgb_only", 50.0), m(1, "fused/a", 80.0), m(2, "rgb_only", 60.0), m(2, "fused/a", 90.0)],
        );
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].row, "rgb_only");
        assert_eq!(t.rows[0].mean_top1, 55.0);
        assert_eq!(t.row("fused/a").unwrap().mean_mca, 42.5);
        assert!(t.to_markdown().contains("| fused/a | 85.00 | 42.50 | 80.0, 90.0 |"));
    }
}
