//! Write the toy dataset to disk and show how the ambiguity knob controls
//! what the semantic maps alone reveal about the scene.
//!
//! `cargo run --release --example generate_toy -- [out_dir] [ambiguity]`

use std::path::PathBuf;

use semattn::data::{DatasetManifest, Split};
use semattn::toy::{generate, render_split, semantic_bag_accuracy, ToySpec};

fn main() -> semattn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).map_or_else(|| PathBuf::from("toy_data"), PathBuf::from);
    let ambiguity = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(0.5);

    let spec = ToySpec { ambiguity, ..ToySpec::default() };
    let manifest = generate(&spec, &out)?;
    println!(
        "{} scene classes, {} semantic labels, {} train / {} val samples in {}",
        manifest.scene_classes.len(),
        manifest.num_semantic_classes,
        manifest.train.len(),
        manifest.val.len(),
        out.display()
    );
    let val = DatasetManifest::load(&out, Split::Val)?;
    let first = val.load_sample(0)?;
    println!(
        "first val sample {}: {}x{} image, label {}",
        first.id,
        first.image.height(),
        first.image.width(),
        val.scene_classes[first.scene_label]
    );

    // Accuracy of reading the scene off the object labels alone.
    println!("\nambiguity  bag-of-labels val top1");
    for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let s = ToySpec { ambiguity: a, val_samples_per_class: 20, ..spec.clone() };
        let samples = render_split(&s, Split::Val)?;
        println!("{a:>9.2}  {:>6.1}", semantic_bag_accuracy(&s, &samples));
    }
    Ok(())
}
