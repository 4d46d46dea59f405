//! Central finite-difference check of the whole fused model at float64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use semattn_nn::functional::{nll_loss, nll_loss_backward};
use semattn_nn::{Mode, Module, Param, Tensor};
use serde::Serialize;

use crate::data::batch::Batch;
use crate::data::transform::CROP_SIZE;
use crate::error::Result;
use crate::model::{ModelConfig, Pathway, SceneNet, FUSION, RGB, SEMANTIC};
use crate::util::derive_seed;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub input_size: usize,
    /// Entries sampled from every parameter tensor.
    pub per_tensor: usize,
    /// Small enough that perturbations rarely push a ReLU or max-pool input
    /// across its kink.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn tiny(num_scene_classes: usize, num_semantic_classes: usize) -> Self {
        Self {
            model: ModelConfig::tiny(num_scene_classes, num_semantic_classes),
            batch_size: 2,
            input_size: CROP_SIZE,
            per_tensor: 2,
            step: 1e-7,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Random normalized RGB and random per-pixel distributions over labels.
pub fn random_batch(n: usize, size: usize, num_classes: usize, labels: &[usize], seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = Tensor::new([n, 3, size, size], (0..n * 3 * size * size).map(|_| rng.sample(StandardNormal)).collect());
    let plane = size * size;
    let mut sem = vec![0.0f64; n * num_classes * plane];
    for i in 0..n {
        for p in 0..plane {
            let raw: Vec<f64> = (0..num_classes).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            for (l, v) in raw.iter().enumerate() {
                sem[(i * num_classes + l) * plane + p] = v / total;
            }
        }
    }
    Batch {
        rgb,
        semantics: Tensor::new([n, num_classes, size, size], sem),
        labels: labels.to_vec(),
        ids: (0..n).map(|i| format!("probe_{i}")).collect(),
    }
}

fn loss(model: &mut SceneNet<f64>, batch: &Batch<f64>, dropout_seed: u64) -> Result<f64> {
    model.attention.reseed_dropout(dropout_seed);
    let lp = model.forward(batch, Pathway::Fused, Mode::Train)?;
    Ok(nll_loss(&lp, &batch.labels))
}

fn with_param<R>(model: &mut SceneNet<f64>, name: &str, f: impl FnOnce(&mut Param<f64>) -> R) -> R {
    let mut f = Some(f);
    let mut out = None;
    model.visit_params_of(&[RGB, SEMANTIC, FUSION], &mut |n, p| {
        if n == name {
            out = f.take().map(|f| f(p));
        }
    });
    out.expect("parameter exists")
}

/// Compare backpropagated gradients of the fused-pathway NLL (train mode,
/// fixed dropout mask) against central differences on sampled entries of
/// every branch and attention parameter.
pub fn check_model_gradients(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = SceneNet::<f64>::new(cfg.model.clone(), cfg.seed)?;
    let k = cfg.model.num_scene_classes();
    let labels: Vec<usize> = (0..cfg.batch_size).map(|i| i % k).collect();
    let batch = random_batch(
        cfg.batch_size,
        cfg.input_size,
        cfg.model.num_semantic_classes(),
        &labels,
        derive_seed(cfg.seed, &[&"gradcheck", &"input"]),
    );
    let dropout_seed = derive_seed(cfg.seed, &[&"gradcheck", &"dropout"]);

    model.zero_grad();
    model.attention.reseed_dropout(dropout_seed);
    let lp = model.forward(&batch, Pathway::Fused, Mode::Train)?;
    let base = nll_loss(&lp, &batch.labels);
    model.backward(Pathway::Fused, &nll_loss_backward(&lp, &batch.labels), true);

    let mut probes = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[&"gradcheck", &"probes"]));
    model.visit_params_of(&[RGB, SEMANTIC, FUSION], &mut |name, p| {
        let n = p.value.len();
        for i in sample(&mut rng, n, cfg.per_tensor.min(n)) {
            probes.push((name.to_string(), i, p.grad[i]));
        }
    });

    let mut entries = Vec::with_capacity(probes.len());
    for (name, index, analytic) in probes {
        let original = with_param(&mut model, &name, |p| p.value[index]);
        with_param(&mut model, &name, |p| p.value[index] = original + cfg.step);
        let plus = loss(&mut model, &batch, dropout_seed)?;
        with_param(&mut model, &name, |p| p.value[index] = original - cfg.step);
        let minus = loss(&mut model, &batch, dropout_seed)?;
        with_param(&mut model, &name, |p| p.value[index] = original);
        let numeric = (plus - minus) / (2.0 * cfg.step);
        entries.push(GradCheckEntry {
            rel_error: relative_error(analytic, numeric, cfg.floor),
            name,
            index,
            analytic,
            numeric,
        });
    }
    Ok(GradCheckReport { entries, loss: base })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn random_semantics_are_distributions() {
        let b = random_batch(1, 4, 3, &[0], 1);
        for p in 0..16 {
            let s: f64 = (0..3).map(|l| b.semantics.data()[l * 16 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
