//! Train the RGB branch briefly on the toy data and compare single
//! center-crop evaluation with the ten-crop protocol.
//!
//! `cargo run --release --example ten_crop_eval -- [epochs] [seed]`

use semattn::data::Split;
use semattn::evaluation::{evaluate, write_predictions, ModelPredictor, Protocol};
use semattn::model::{ModelConfig, Pathway};
use semattn::toy::{render_split, ToySpec};
use semattn::training::{train_stage, Dependencies, Stage, StageData, TrainConfig};

fn main() -> semattn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let seed = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(0);

    // ambiguity 0 gives the RGB branch something to learn beyond style
    let spec = ToySpec { seed, ambiguity: 0.0, samples_per_class: 24, val_samples_per_class: 12, ..ToySpec::default() };
    let train = render_split(&spec, Split::Train)?;
    let val = render_split(&spec, Split::Val)?;
    let cfg = TrainConfig {
        max_epochs: epochs,
        lr_step_epochs: 0,
        batch_size: 16,
        learning_rate: 0.02,
        seed,
        ..TrainConfig::new(Stage::BranchRgb)
    };
    let model_cfg = ModelConfig::tiny(spec.num_scene_classes, spec.num_semantic_classes);
    let mut out = train_stage(
        &model_cfg,
        &cfg,
        StageData { train: &train, val: None },
        Dependencies::default(),
        &mut |l| eprintln!("epoch {} loss {:.4}", l.epoch, l.loss),
    )?;

    let mut predictor = ModelPredictor { model: &mut out.model, pathway: Pathway::Rgb };
    for protocol in [Protocol::Single, Protocol::TenCrop] {
        let t = std::time::Instant::now();
        let (records, report) = evaluate(&mut predictor, &val, protocol, 16)?;
        println!(
            "{protocol:?}: top1 {:.2} top2 {:.2} mca {:.2} over {} samples ({:.1}s)",
            report.top1,
            report.top2,
            report.mca,
            report.n_samples,
            t.elapsed().as_secs_f64()
        );
        if protocol == Protocol::TenCrop {
            let path = std::env::temp_dir().join("semattn_ten_crop_predictions.jsonl");
            write_predictions(&path, &records)?;
            println!("predictions written to {}", path.display());
        }
    }
    Ok(())
}
