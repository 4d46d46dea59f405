//! Push one 224×224 sample through the full-width network and print every
//! intermediate shape of the attention module, plus parameter counts.
//!
//! `cargo run --release --example shape_walkthrough -- [scene_classes] [semantic_classes]`

use semattn::data::{RgbImage, Sample, SemanticScoreTensor};
use semattn::data::batch::Batch;
use semattn::model::{ModelConfig, Pathway, SceneNet, FUSION, RGB, SEMANTIC};
use semattn_nn::Mode;

fn main() -> semattn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let k = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let l = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(150);

    let cfg = ModelConfig::full(k, l);
    let mut model = SceneNet::<f32>::new(cfg.clone(), 0)?;
    let sample = Sample {
        id: "probe".into(),
        image: RgbImage::from_fn(224, 224, |y, x| [y as f32 / 224.0, x as f32 / 224.0, 0.5])?,
        semantics: SemanticScoreTensor::uniform_label(224, 224, l, 1)?,
        scene_label: 0,
    };
    let batch = Batch::<f32>::from_samples(&[sample])?;
    let t = std::time::Instant::now();
    let lp = model.forward(&batch, Pathway::Fused, Mode::Eval)?;
    println!("forward of one sample took {:.2}s\n", t.elapsed().as_secs_f64());

    println!("{:<20} {:>14}", "tensor", "C x H x W");
    for (name, [_, c, h, w]) in model.trace() {
        println!("{name:<20} {:>14}", format!("{c}x{h}x{w}"));
    }
    println!("{:<20} {:>14}", "log_probs", format!("{}", lp.item_len()));

    for part in [RGB, SEMANTIC, FUSION] {
        let mut n = 0;
        model.visit_params_of(&[part], &mut |_, p| n += p.value.len());
        println!("{part:<9} parameters: {n}");
    }
    Ok(())
}
