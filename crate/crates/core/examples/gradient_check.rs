//! Finite-difference check of the whole tiny model at float64.
//!
//! `cargo run --release --example gradient_check`

use semattn::gradcheck::{check_model_gradients, GradCheckConfig};

fn main() -> semattn::Result<()> {
    let started = std::time::Instant::now();
    let mut cfg = GradCheckConfig::tiny(3, 6);
    if let Some(s) = std::env::args().nth(1) {
        cfg.seed = s.parse().expect("seed");
    }
    let report = check_model_gradients(&cfg)?;
    let mut worst: Vec<_> = report.entries.iter().collect();
    worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    for e in worst.iter().filter(|e| e.rel_error > 1e-4) {
        println!("{:<40} [{:>5}] analytic {:+.6e} numeric {:+.6e} rel {:.2e}", e.name, e.index, e.analytic, e.numeric, e.rel_error);
    }
    println!(
        "{} entries, loss {:.6}, max relative error {:.3e} ({:.1}s)",
        report.entries.len(),
        report.loss,
        report.max_rel_error(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
