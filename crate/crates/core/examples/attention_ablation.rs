//! Compare fusion variants along one ablation axis on the toy dataset.
//!
//! `cargo run --release --example attention_ablation -- [axis] [epochs] [seeds]`
//!
//! `axis` is one of mechanism, fusion_depth, semantic_backbone or
//! semantic_subset; `seeds` is a comma-separated list.

use semattn::ablation::{run_ablation, Axis};
use semattn::data::Split;
use semattn::model::ModelConfig;
use semattn::toy::{render_split, ToySpec};
use semattn::training::{Stage, TrainConfig};

fn main() -> semattn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let axis: Axis = args.get(1).map_or("mechanism", String::as_str).parse()?;
    let epochs = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(8);
    let seeds: Vec<u64> = args
        .get(3)
        .map_or("0", String::as_str)
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();

    let spec = ToySpec::default();
    let train = render_split(&spec, Split::Train)?;
    let val = render_split(&spec, Split::Val)?;
    let base = ModelConfig::tiny(spec.num_scene_classes, spec.num_semantic_classes);
    let cfg = TrainConfig {
        max_epochs: epochs,
        lr_step_epochs: epochs * 2 / 3,
        batch_size: 16,
        learning_rate: 0.01,
        ..TrainConfig::new(Stage::Fusion)
    };
    let mut log = |row: &str, l: &semattn::training::EpochLog| {
        if l.split == "val" {
            eprintln!("{row}: val top1 {:.1}", l.top1);
        }
    };
    let table = run_ablation(axis, &base, &cfg, &train, &val, &seeds, &[12, 8, 4], &mut log)?;
    print!("{}", table.to_markdown());
    let dir = std::env::temp_dir().join("semattn_ablation");
    table.save(&dir)?;
    println!("table and chart written to {}", dir.display());
    Ok(())
}
