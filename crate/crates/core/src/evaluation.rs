//! Top@k and mean class accuracy under single-crop and ten-crop protocols.

use std::path::Path;

use semattn_nn::Mode;
use serde::{Deserialize, Serialize};

use crate::data::batch::Batch;
use crate::data::dataset::Sample;
use crate::data::transform::{center_crop_sample, ten_crop_sample};
use crate::error::{Error, Result};
use crate::model::{Pathway, SceneNet};
use crate::util::{atomic_write, write_json};

/// Per-sample log-probabilities and ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub log_probs: Vec<f64>,
    pub target: usize,
}

impl PredictionRecord {
    /// Zero-based rank of the target; ties go to the lower class index.
    pub fn target_rank(&self) -> usize {
        rank_of(&self.log_probs, self.target)
    }

    /// The `k` best classes, best first.
    pub fn top_classes(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.log_probs.len()).collect();
        order.sort_by(|&a, &b| self.log_probs[b].total_cmp(&self.log_probs[a]).then(a.cmp(&b)));
        order.truncate(k);
        order
    }
}

/// Number of classes ranked ahead of `class`: strictly higher score, or an
/// equal score at a lower index.
pub fn rank_of(log_probs: &[f64], class: usize) -> usize {
    let v = log_probs[class];
    log_probs
        .iter()
        .enumerate()
        .filter(|&(j, &u)| u > v || (u == v && j < class))
        .count()
}

/// Percentage of records whose target is among the `k` highest scores.
pub fn top_k_accuracy(records: &[PredictionRecord], k: usize) -> Result<f64> {
    let first = records
        .first()
        .ok_or_else(|| Error::UndefinedMetric("Top@k over zero records".into()))?;
    let num_classes = first.log_probs.len();
    if k == 0 || k > num_classes {
        return Err(Error::range("k", format!("{k} not in 1..={num_classes}")));
    }
    let hits = records.iter().filter(|r| r.target_rank() < k).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// Top@1 per class; `None` for classes absent from `records`.
pub fn per_class_top1(records: &[PredictionRecord], num_classes: usize) -> Result<Vec<Option<f64>>> {
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for r in records {
        if r.target >= num_classes {
            return Err(Error::range("target", format!("{} with K={num_classes}", r.target)));
        }
        total[r.target] += 1;
        if r.target_rank() == 0 {
            correct[r.target] += 1;
        }
    }
    Ok(correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| 100.0 * c as f64 / t as f64))
        .collect())
}

/// Unweighted mean of per-class Top@1 over the classes present in
/// `records`; absent classes are skipped with a warning.
pub fn mean_class_accuracy(records: &[PredictionRecord], num_classes: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("MCA over zero records".into()));
    }
    let per_class = per_class_top1(records, num_classes)?;
    let covered: Vec<f64> = per_class.iter().flatten().copied().collect();
    if covered.len() < num_classes {
        log::warn!(
            "MCA averages over {} of {num_classes} classes; the rest have no samples",
            covered.len()
        );
    }
    Ok(covered.iter().sum::<f64>() / covered.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Single,
    TenCrop,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Protocol::Single),
            "ten_crop" => Ok(Protocol::TenCrop),
            other => Err(Error::config("protocol", format!("expected single or ten_crop, got `{other}`"))),
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub top2: f64,
    pub top5: f64,
    pub mca: f64,
    /// `null` for classes without samples.
    pub per_class_top1: Vec<Option<f64>>,
    pub covered_classes: usize,
    pub n_samples: usize,
    pub protocol: Protocol,
}

impl MetricsReport {
    /// Top@2 and Top@5 clamp `k` to `K` when there are fewer classes.
    pub fn from_records(records: &[PredictionRecord], num_classes: usize, protocol: Protocol) -> Result<Self> {
        let per_class_top1 = per_class_top1(records, num_classes)?;
        Ok(Self {
            top1: top_k_accuracy(records, 1)?,
            top2: top_k_accuracy(records, 2.min(num_classes))?,
            top5: top_k_accuracy(records, 5.min(num_classes))?,
            mca: mean_class_accuracy(records, num_classes)?,
            covered_classes: per_class_top1.iter().flatten().count(),
            per_class_top1,
            n_samples: records.len(),
            protocol,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Anything mapping a batch to per-row log-probabilities.
pub trait Predictor {
    fn num_classes(&self) -> usize;

    fn predict(&mut self, batch: &Batch<f32>) -> Result<Vec<Vec<f64>>>;
}

/// A [`SceneNet`] evaluated in eval mode along one pathway.
pub struct ModelPredictor<'a> {
    pub model: &'a mut SceneNet<f32>,
    pub pathway: Pathway,
}

impl Predictor for ModelPredictor<'_> {
    fn num_classes(&self) -> usize {
        self.model.config.num_scene_classes()
    }

    fn predict(&mut self, batch: &Batch<f32>) -> Result<Vec<Vec<f64>>> {
        let lp = self.model.forward(batch, self.pathway, Mode::Eval)?;
        Ok(lp
            .data()
            .chunks_exact(lp.item_len())
            .map(|row| row.iter().map(|&v| f64::from(v)).collect())
            .collect())
    }
}

/// `log(mean_i exp(lp_i))` per class: probabilities are averaged, then
/// re-logged.
pub fn average_log_probs(crops: &[Vec<f64>]) -> Vec<f64> {
    let k = crops[0].len();
    let ln_n = (crops.len() as f64).ln();
    let mut out: Vec<f64> = (0..k)
        .map(|j| {
            let max = crops.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return max;
            }
            max + crops.iter().map(|c| (c[j] - max).exp()).sum::<f64>().ln() - ln_n
        })
        .collect();
    // absorb rounding so the result is a normalized distribution
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    out.iter_mut().for_each(|v| *v -= lse);
    out
}

/// Average the predictions over the ten standard crops.
pub fn ten_crop_predict(predictor: &mut dyn Predictor, sample: &Sample) -> Result<PredictionRecord> {
    let crops = ten_crop_sample(sample)?;
    let rows = predictor.predict(&Batch::from_samples(&crops)?)?;
    Ok(PredictionRecord {
        sample_id: sample.id.clone(),
        log_probs: average_log_probs(&rows),
        target: sample.scene_label,
    })
}

/// Predictions for every sample under `protocol`.
pub fn predict_samples(
    predictor: &mut dyn Predictor,
    samples: &[Sample],
    protocol: Protocol,
    batch_size: usize,
) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::with_capacity(samples.len());
    match protocol {
        Protocol::TenCrop => {
            for s in samples {
                records.push(ten_crop_predict(predictor, s)?);
            }
        }
        Protocol::Single => {
            for chunk in samples.chunks(batch_size.max(1)) {
                let crops = chunk.iter().map(center_crop_sample).collect::<Result<Vec<_>>>()?;
                let rows = predictor.predict(&Batch::from_samples(&crops)?)?;
                for (s, lp) in chunk.iter().zip(rows) {
                    records.push(PredictionRecord {
                        sample_id: s.id.clone(),
                        log_probs: lp,
                        target: s.scene_label,
                    });
                }
            }
        }
    }
    Ok(records)
}

pub fn evaluate(
    predictor: &mut dyn Predictor,
    samples: &[Sample],
    protocol: Protocol,
    batch_size: usize,
) -> Result<(Vec<PredictionRecord>, MetricsReport)> {
    let records = predict_samples(predictor, samples, protocol, batch_size)?;
    let report = MetricsReport::from_records(&records, predictor.num_classes(), protocol)?;
    Ok((records, report))
}

/// One line of the predictions dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub target: usize,
    pub top5_labels: Vec<usize>,
    pub top5_log_probs: Vec<f64>,
}

impl From<&PredictionRecord> for PredictionLine {
    fn from(r: &PredictionRecord) -> Self {
        let top = r.top_classes(5);
        Self {
            id: r.sample_id.clone(),
            target: r.target,
            top5_log_probs: top.iter().map(|&c| r.log_probs[c]).collect(),
            top5_labels: top,
        }
    }
}

/// Write one JSON object per line.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &PredictionLine::from(r)).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push(b'\n');
    }
    atomic_write(path, &out)
}
