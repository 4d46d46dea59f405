//! Train both branches and the attention module on a small toy dataset,
//! then report validation accuracy of each pathway.
//!
//! `cargo run --release --example two_stage_training -- [epochs] [seed] [branch_lr] [fusion_lr]`

use semattn::data::Split;
use semattn::evaluation::{evaluate, ModelPredictor, Protocol};
use semattn::model::{ModelConfig, Pathway};
use semattn::toy::{render_split, ToySpec};
use semattn::training::{train_stage, Dependencies, Stage, StageData, TrainConfig};

fn main() -> semattn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(12);
    let seed = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(0);
    let branch_lr = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(0.01);
    let fusion_lr = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(0.01);

    let spec = ToySpec { seed, ..ToySpec::default() };
    let train = render_split(&spec, Split::Train)?;
    let val = render_split(&spec, Split::Val)?;
    let model_cfg = ModelConfig::tiny(spec.num_scene_classes, spec.num_semantic_classes);
    let data = StageData { train: &train, val: Some(&val) };

    let config = |stage| TrainConfig {
        max_epochs: epochs,
        lr_step_epochs: epochs * 2 / 3,
        batch_size: 16,
        learning_rate: if stage == Stage::Fusion { fusion_lr } else { branch_lr },
        seed,
        ..TrainConfig::new(stage)
    };
    let mut log = |l: &semattn::training::EpochLog| {
        eprintln!("epoch {:>3} {:<5} loss {:.4} top1 {:5.1} ({:.0}s)", l.epoch, l.split, l.loss, l.top1, l.wall_time_s)
    };

    let rgb = train_stage(&model_cfg, &config(Stage::BranchRgb), data, Dependencies::default(), &mut log)?;
    let sem = train_stage(&model_cfg, &config(Stage::BranchSemantic), data, Dependencies::default(), &mut log)?;
    let deps = Dependencies { rgb: Some(&rgb.checkpoint), semantic: Some(&sem.checkpoint), resume: None };
    let mut fused = train_stage(&model_cfg, &config(Stage::Fusion), data, deps, &mut log)?;

    for pathway in [Pathway::Rgb, Pathway::Semantic, Pathway::Fused] {
        let mut p = ModelPredictor { model: &mut fused.model, pathway };
        let (_, report) = evaluate(&mut p, &val, Protocol::Single, 16)?;
        println!("{:<9} top1 {:5.1}  mca {:5.1}", pathway.name(), report.top1, report.mca);
    }
    Ok(())
}
