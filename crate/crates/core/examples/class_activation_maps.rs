//! Train the two branches and the attention module on the toy data, then
//! render class activation maps and rank semantic labels by the share of
//! activation they receive.
//!
//! `cargo run --release --example class_activation_maps -- [out_dir] [epochs]`

use std::path::PathBuf;

use semattn::data::Split;
use semattn::interpret::explain;
use semattn::model::{ModelConfig, Pathway};
use semattn::toy::{render_split, ToySpec};
use semattn::training::{train_stage, Dependencies, Stage, StageData, TrainConfig};

fn main() -> semattn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).map_or_else(|| PathBuf::from("cam_out"), PathBuf::from);
    let epochs = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(8);

    let spec = ToySpec { samples_per_class: 24, val_samples_per_class: 8, ..ToySpec::default() };
    let train = render_split(&spec, Split::Train)?;
    let val = render_split(&spec, Split::Val)?;
    let model_cfg = ModelConfig::tiny(spec.num_scene_classes, spec.num_semantic_classes);
    let data = StageData { train: &train, val: None };
    let cfg = |stage, lr| TrainConfig { max_epochs: epochs, lr_step_epochs: 0, batch_size: 16, learning_rate: lr, ..TrainConfig::new(stage) };
    let mut log = |l: &semattn::training::EpochLog| eprintln!("epoch {} loss {:.4}", l.epoch, l.loss);

    let rgb = train_stage(&model_cfg, &cfg(Stage::BranchRgb, 0.02), data, Dependencies::default(), &mut log)?;
    let sem = train_stage(&model_cfg, &cfg(Stage::BranchSemantic, 0.02), data, Dependencies::default(), &mut log)?;
    let deps = Dependencies { rgb: Some(&rgb.checkpoint), semantic: Some(&sem.checkpoint), resume: None };
    let mut fused = train_stage(&model_cfg, &cfg(Stage::Fusion, 0.01), data, deps, &mut log)?;

    let names = spec.semantic_label_names();
    for pathway in [Pathway::Semantic, Pathway::Fused] {
        let dir = out.join(pathway.name());
        let ex = explain(&mut fused.model, &val, pathway, &names, spec.label_groups(), 16, Some(&dir))?;
        println!("{} pathway: {} maps in {}", pathway.name(), ex.maps.len(), dir.display());
        for e in ex.report.iter().take(5) {
            println!("  {:<12} {:?} {:.3}", e.label_name, e.group, e.weight);
        }
    }
    Ok(())
}
