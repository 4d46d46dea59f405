//! Sparsify dense segmentation scores to the top three labels per pixel,
//! round-trip them through a `.sem` file and compare.
//!
//! `cargo run --release --example semantic_io -- [height] [width] [labels]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semattn::data::{densify, sparsify, DenseScores, SemanticScoreTensor};

fn main() -> semattn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let h = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(64);
    let w = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(48);
    let l = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(150);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut values = vec![0.0f32; h * w * l];
    for px in values.chunks_exact_mut(l) {
        // a peaked softmax, as a segmentation network would produce
        let logits: Vec<f32> = (0..l).map(|_| rng.random::<f32>() * 8.0).collect();
        let total: f32 = logits.iter().map(|v| v.exp()).sum();
        px.iter_mut().zip(&logits).for_each(|(o, v)| *o = v.exp() / total);
    }
    let dense = DenseScores::new(h, w, l, values)?;
    let sparse = sparsify(&dense);

    let dir = std::env::temp_dir().join("semattn_semantic_io");
    std::fs::create_dir_all(&dir).map_err(|e| semattn::Error::Format(e.to_string()))?;
    let path = dir.join("example.sem");
    sparse.write_sem(&path)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    let back = SemanticScoreTensor::read_sem(&path)?;
    let restored = densify(&back)?;

    let (labels, scores) = back.record(0, 0);
    println!("{h}x{w} pixels over {l} labels: dense {} bytes, .sem {bytes} bytes", 4 * h * w * l);
    println!("pixel (0,0): top labels {labels:?} with scores {scores:?}");
    println!("identical after round trip: {}", back == sparse);
    println!(
        "kept mass: {:.4} of {:.4} (top three labels per pixel)",
        restored.values.iter().map(|&v| f64::from(v)).sum::<f64>(),
        dense.values.iter().map(|&v| f64::from(v)).sum::<f64>()
    );
    Ok(())
}
