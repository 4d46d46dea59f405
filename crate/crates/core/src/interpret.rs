//! Class activation maps and object–scene attention statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use semattn_nn::layers::Linear;
use serde::{Deserialize, Serialize};

use crate::data::batch::Batch;
use crate::data::dataset::{LabelGroup, Sample};
use crate::data::image::RgbImage;
use crate::data::semantic::SemanticScoreTensor;
use crate::data::transform::{center_crop_sample, CROP_SIZE};
use crate::error::{Error, Result};
use crate::evaluation::PredictionRecord;
use crate::feature::FeatureMap;
use crate::model::{Pathway, SceneNet};
use crate::util::{atomic_write, write_json};

pub const CAM_MAGIC: &[u8; 4] = b"CAM1";
pub const CAM_HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamSource {
    RgbBranch,
    SemanticBranch,
    Fused,
}

impl From<Pathway> for CamSource {
    fn from(p: Pathway) -> Self {
        match p {
            Pathway::Rgb => CamSource::RgbBranch,
            Pathway::Semantic => CamSource::SemanticBranch,
            Pathway::Fused => CamSource::Fused,
        }
    }
}

/// A normalized `height × width` activation map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub source: CamSource,
    pub predicted_class: usize,
    /// Three best `(class, log-probability)` pairs, best first.
    pub top3: Vec<(usize, f64)>,
}

impl ActivationMap {
    pub fn mass(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CAM_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(CAM_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_cam(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }
}

/// Decode the raw grid of a `.cam` file.
pub fn read_cam_grid(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < CAM_HEADER_LEN || &bytes[..4] != CAM_MAGIC {
        return Err(Error::Format("missing CAM1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let body = &bytes[CAM_HEADER_LEN..];
    if body.len() != 4 * h * w {
        return Err(Error::Format(format!("CAM body has {} bytes, expected {}", body.len(), 4 * h * w)));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((h, w, values))
}

/// Channel-weighted sum of `features` with `weights`, at feature resolution.
pub fn weighted_sum(features: &FeatureMap<f32>, weights: &[f32]) -> Result<Vec<f64>> {
    if weights.len() != features.channels {
        return Err(Error::shape("classifier weights", features.channels, weights.len()));
    }
    let mut out = vec![0.0f64; features.plane()];
    for (c, &w) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(features.channel(c)) {
            *o += f64::from(w) * f64::from(v);
        }
    }
    Ok(out)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ty) = axis(y, h, out_h);
        for &(x0, x1, tx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Min-max normalize to `[0, 1]`. A map whose range vanishes relative to its
/// magnitude carries no spatial information and becomes all zeros.
pub fn normalize_min_max(values: &[f64]) -> Vec<f32> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    let scale = min.abs().max(max.abs());
    if !(range > 1e-9 * scale) || !range.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - min) / range) as f32).collect()
}

/// CAM of `class_index` from the pre-pool `features` feeding `classifier`,
/// upsampled to `CROP_SIZE × CROP_SIZE` and normalized.
pub fn compute_cam(features: &FeatureMap<f32>, classifier: &Linear<f32>, class_index: usize, source: CamSource) -> Result<ActivationMap> {
    if class_index >= classifier.out_features {
        return Err(Error::range(
            "CAM class index",
            format!("{class_index} with K={}", classifier.out_features),
        ));
    }
    let raw = weighted_sum(features, classifier.weight_row(class_index))?;
    let up = upsample_bilinear(&raw, features.height, features.width, CROP_SIZE, CROP_SIZE);
    Ok(ActivationMap {
        height: CROP_SIZE,
        width: CROP_SIZE,
        values: normalize_min_max(&up),
        source,
        predicted_class: class_index,
        top3: Vec::new(),
    })
}

/// Per-label CAM mass over a set of images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSceneCorrelation {
    pub attention: Vec<f64>,
    pub sample_count: usize,
    pub partition: Vec<LabelGroup>,
}

impl ObjectSceneCorrelation {
    pub fn new(partition: Vec<LabelGroup>) -> Self {
        Self {
            attention: vec![0.0; partition.len()],
            sample_count: 0,
            partition,
        }
    }

    pub fn total(&self) -> f64 {
        self.attention.iter().sum()
    }

    /// Fold in another shard's accumulation.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.attention.len() != self.attention.len() {
            return Err(Error::shape("correlation labels", self.attention.len(), other.attention.len()));
        }
        self.attention.iter_mut().zip(&other.attention).for_each(|(a, b)| *a += b);
        self.sample_count += other.sample_count;
        Ok(())
    }
}

/// Add each CAM pixel to the bin of that pixel's top-1 semantic label.
pub fn accumulate_object_attention(cam: &ActivationMap, semantics: &SemanticScoreTensor, acc: &mut ObjectSceneCorrelation) -> Result<()> {
    if (cam.height, cam.width) != (semantics.height(), semantics.width()) {
        return Err(Error::shape(
            "CAM vs semantics",
            format!("{}×{}", cam.height, cam.width),
            format!("{}×{}", semantics.height(), semantics.width()),
        ));
    }
    if semantics.num_classes() != acc.attention.len() {
        return Err(Error::shape("semantic labels", acc.attention.len(), semantics.num_classes()));
    }
    for y in 0..cam.height {
        for x in 0..cam.width {
            let label = semantics.top1_label(y, x) as usize;
            acc.attention[label] += f64::from(cam.values[y * cam.width + x]);
        }
    }
    acc.sample_count += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub label: usize,
    pub label_name: String,
    pub group: LabelGroup,
    pub weight: f64,
}

/// Labels by descending normalized attention, ties to the lower label.
pub fn emit_correlation_report(acc: &ObjectSceneCorrelation, label_names: &[String]) -> Result<Vec<CorrelationEntry>> {
    let total = acc.total();
    if !(total > 0.0) {
        return Err(Error::UndefinedMetric("no attention has been accumulated".into()));
    }
    let mut entries: Vec<CorrelationEntry> = acc
        .attention
        .iter()
        .enumerate()
        .map(|(l, &a)| CorrelationEntry {
            label: l,
            label_name: label_names.get(l).cloned().unwrap_or_else(|| format!("label_{l}")),
            group: acc.partition[l],
            weight: a / total,
        })
        .collect();
    entries.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.label.cmp(&b.label)));
    Ok(entries)
}

/// Report entries split by group, each keeping the global order.
pub fn group_report(entries: &[CorrelationEntry]) -> BTreeMap<LabelGroup, Vec<CorrelationEntry>> {
    let mut out: BTreeMap<LabelGroup, Vec<CorrelationEntry>> = BTreeMap::new();
    for e in entries {
        out.entry(e.group).or_default().push(e.clone());
    }
    out
}

fn group_color(g: LabelGroup) -> [u8; 3] {
    match g {
        LabelGroup::Indoor => [214, 96, 77],
        LabelGroup::Outdoor => [67, 147, 195],
        LabelGroup::Both => [120, 120, 120],
    }
}

/// Horizontal bars, one row per label in report order, colored by group.
pub fn correlation_chart(entries: &[CorrelationEntry]) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (row, width, margin) = (12u32, 400u32, 4u32);
    let height = (entries.len() as u32 * row + 2 * margin).max(1);
    let max = entries.iter().map(|e| e.weight).fold(0.0, f64::max);
    let mut img = ImageBuffer::from_pixel(width, height, Rgb([255u8, 255, 255]));
    for (i, e) in entries.iter().enumerate() {
        let len = if max > 0.0 { ((width - 2 * margin) as f64 * e.weight / max).round() as u32 } else { 0 };
        let y0 = margin + i as u32 * row;
        for y in y0 + 1..y0 + row - 1 {
            for x in margin..margin + len {
                img.put_pixel(x, y, Rgb(group_color(e.group)));
            }
        }
    }
    img
}

/// Blue (0) to red (1) through cyan, yellow.
fn jet(v: f32) -> [f32; 3] {
    let c = |x: f32| x.clamp(0.0, 1.0);
    [c(1.5 - (4.0 * v - 3.0).abs()), c(1.5 - (4.0 * v - 2.0).abs()), c(1.5 - (4.0 * v - 1.0).abs())]
}

/// Half-transparent heat map over an image of the same size.
pub fn cam_overlay(image: &RgbImage, cam: &ActivationMap) -> Result<RgbImage> {
    if (image.height(), image.width()) != (cam.height, cam.width) {
        return Err(Error::shape(
            "overlay image",
            format!("{}×{}", cam.height, cam.width),
            format!("{}×{}", image.height(), image.width()),
        ));
    }
    RgbImage::from_fn(cam.height, cam.width, |y, x| {
        let heat = jet(cam.values[y * cam.width + x]);
        let px = image.pixel(y, x);
        [0, 1, 2].map(|c| 0.5 * px[c] + 0.5 * heat[c])
    })
}

fn encode_png(img: &ImageBuffer<Rgb<u8>, Vec<u8>>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    atomic_write(path, &bytes)
}

/// Outputs of [`explain`].
#[derive(Clone, Debug)]
pub struct Explanation {
    pub maps: Vec<(String, ActivationMap)>,
    pub records: Vec<PredictionRecord>,
    pub correlation: ObjectSceneCorrelation,
    pub report: Vec<CorrelationEntry>,
}

/// CAMs of each sample's predicted class along `pathway` (center crop), plus
/// the object–scene correlation accumulated over all of them. When
/// `out_dir` is given, writes `<id>_<pathway>.png` / `.cam` per sample,
/// `correlation.json` and `correlation.png`.
pub fn explain(
    model: &mut SceneNet<f32>,
    samples: &[Sample],
    pathway: Pathway,
    label_names: &[String],
    partition: Vec<LabelGroup>,
    batch_size: usize,
    out_dir: Option<&Path>,
) -> Result<Explanation> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut correlation = ObjectSceneCorrelation::new(partition);
    let mut maps = Vec::with_capacity(samples.len());
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let crops = chunk.iter().map(center_crop_sample).collect::<Result<Vec<_>>>()?;
        let batch = Batch::<f32>::from_samples(&crops)?;
        let features = model.cam_features(&batch, pathway)?;
        let log_probs = model.classify_features(pathway, &features);
        for (i, crop) in crops.iter().enumerate() {
            let record = PredictionRecord {
                sample_id: crop.id.clone(),
                log_probs: log_probs.item(i).iter().map(|&v| f64::from(v)).collect(),
                target: crop.scene_label,
            };
            let top = record.top_classes(3);
            let mut cam = compute_cam(&FeatureMap::from_tensor(&features, i), model.classifier(pathway), top[0], pathway.into())?;
            cam.top3 = top.iter().map(|&c| (c, record.log_probs[c])).collect();
            accumulate_object_attention(&cam, &crop.semantics, &mut correlation)?;
            if let Some(dir) = out_dir {
                let stem: PathBuf = dir.join(format!("{}_{}", crop.id, pathway.name()));
                cam_overlay(&crop.image, &cam)?.save_png(&stem.with_extension("png"))?;
                cam.write_cam(&stem.with_extension("cam"))?;
            }
            maps.push((crop.id.clone(), cam));
            records.push(record);
        }
    }
    let report = emit_correlation_report(&correlation, label_names)?;
    if let Some(dir) = out_dir {
        write_json(&dir.join("correlation.json"), &report)?;
        encode_png(&correlation_chart(&report), &dir.join("correlation.png"))?;
    }
    Ok(Explanation {
        maps,
        records,
        correlation,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::semantic::{sparsify, DenseScores};

    fn linear(k: usize, c: usize, weights: Vec<f32>) -> Linear<f32> {
        Linear::from_values(c, k, weights, None)
    }

    #[test]
    fn single_channel_unit_weight_is_the_normalized_map() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let raw = weighted_sum(&f, &[1.0]).unwrap();
        assert_eq!(raw, vec![1.0, 2.0, 3.0, 5.0]);
        let cam = compute_cam(&f, &linear(1, 1, vec![1.0]), 0, CamSource::RgbBranch).unwrap();
        let direct = normalize_min_max(&upsample_bilinear(&[1.0, 2.0, 3.0, 5.0], 2, 2, CROP_SIZE, CROP_SIZE));
        assert_eq!(cam.values, direct);
    }

    #[test]
    fn two_channel_weighted_sum_by_hand() {
        // channel 0: [1 2; 3 4], channel 1: [4 0; 1 2], weights {1, -1}
        let f = FeatureMap::new(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 4.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(weighted_sum(&f, &[1.0, -1.0]).unwrap(), vec![-3.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_features_give_zero_map() {
        let f = FeatureMap::new(3, 4, 4, vec![0.7; 48]).unwrap();
        let cam = compute_cam(&f, &linear(2, 3, vec![0.3, -1.0, 2.0, 1.0, 1.0, 1.0]), 1, CamSource::Fused).unwrap();
        assert!(cam.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cam_range_is_unit_interval() {
        let values: Vec<f32> = (0..2 * 7 * 7).map(|i| ((i * 37) % 11) as f32 - 4.0).collect();
        let f = FeatureMap::new(2, 7, 7, values).unwrap();
        let cam = compute_cam(&f, &linear(1, 2, vec![0.5, -0.25]), 0, CamSource::SemanticBranch).unwrap();
        let (lo, hi) = cam.values.iter().fold((1.0f32, 0.0f32), |(a, b), &v| (a.min(v), b.max(v)));
        assert_eq!((lo, hi), (0.0, 1.0));
        assert_eq!(cam.values.len(), CROP_SIZE * CROP_SIZE);
    }

    #[test]
    fn class_index_out_of_range() {
        let f = FeatureMap::new(1, 1, 1, vec![1.0]).unwrap();
        assert!(matches!(compute_cam(&f, &linear(2, 1, vec![1.0, 1.0]), 2, CamSource::Fused), Err(Error::Range { .. })));
    }

    #[test]
    fn upsampling_a_constant_or_identity() {
        let up = upsample_bilinear(&[2.0; 9], 3, 3, 8, 8);
        assert!(up.iter().all(|&v| (v - 2.0).abs() < 1e-15));
        let src = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(upsample_bilinear(&src, 2, 2, 2, 2), src.to_vec());
        // half-pixel centers: output (0, 1) of a 2→4 upsample sits at source x = 0.25
        let up = upsample_bilinear(&[0.0, 4.0, 0.0, 4.0], 2, 2, 2, 4);
        assert_eq!(up[..4], [0.0, 1.0, 3.0, 4.0]);
    }

    fn semantics(labels: &[usize], h: usize, w: usize, l: usize) -> SemanticScoreTensor {
        let mut dense = vec![0.0; h * w * l];
        for (px, &lab) in dense.chunks_exact_mut(l).zip(labels) {
            px[lab] = 1.0;
        }
        sparsify(&DenseScores::new(h, w, l, dense).unwrap())
    }

    fn cam(values: Vec<f32>, h: usize, w: usize) -> ActivationMap {
        ActivationMap {
            height: h,
            width: w,
            values,
            source: CamSource::Fused,
            predicted_class: 0,
            top3: vec![],
        }
    }

    #[test]
    fn accumulation_matches_pixel_loop() {
        let (h, w, l) = (4, 5, 9);
        let labels: Vec<usize> = (0..h * w).map(|i| if (i / w + i % w) % 3 == 0 { 2 } else { 7 }).collect();
        let values: Vec<f32> = (0..h * w).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let mut acc = ObjectSceneCorrelation::new(vec![LabelGroup::Both; l]);
        accumulate_object_attention(&cam(values.clone(), h, w), &semantics(&labels, h, w, l), &mut acc).unwrap();
        let mut oracle = vec![0.0f64; l];
        for i in 0..h * w {
            oracle[labels[i]] += f64::from(values[i]);
        }
        assert_eq!(acc.attention, oracle);
    }

    #[test]
    fn all_one_cam_counts_pixels_and_zero_cam_is_inert() {
        let n = CROP_SIZE;
        let sem = semantics(&vec![7; n * n], n, n, 8);
        let mut acc = ObjectSceneCorrelation::new(vec![LabelGroup::Both; 8]);
        accumulate_object_attention(&cam(vec![0.0; n * n], n, n), &sem, &mut acc).unwrap();
        assert_eq!(acc.total(), 0.0);
        accumulate_object_attention(&cam(vec![1.0; n * n], n, n), &sem, &mut acc).unwrap();
        assert_eq!(acc.attention[7], (n * n) as f64);
    }

    #[test]
    fn misaligned_semantics_rejected() {
        let mut acc = ObjectSceneCorrelation::new(vec![LabelGroup::Both; 3]);
        let err = accumulate_object_attention(&cam(vec![0.0; 4], 2, 2), &semantics(&[0; 6], 2, 3, 3), &mut acc);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn report_ordering_and_normalization() {
        let names: Vec<String> = (0..4).map(|l| format!("l{l}")).collect();
        let mut acc = ObjectSceneCorrelation::new(vec![LabelGroup::Indoor, LabelGroup::Outdoor, LabelGroup::Both, LabelGroup::Indoor]);
        acc.attention = vec![0.0, 3.0, 0.0, 0.0];
        let r = emit_correlation_report(&acc, &names).unwrap();
        assert_eq!((r[0].label, r[0].weight), (1, 1.0));

        acc.attention = vec![1.0, 2.0, 2.0, 0.5];
        let r = emit_correlation_report(&acc, &names).unwrap();
        assert_eq!(r.iter().map(|e| e.label).collect::<Vec<_>>(), [1, 2, 0, 3]);
        assert!((r.iter().map(|e| e.weight).sum::<f64>() - 1.0).abs() < 1e-9);
        let g = group_report(&r);
        assert_eq!(g[&LabelGroup::Indoor].iter().map(|e| e.label).collect::<Vec<_>>(), [0, 3]);

        acc.attention = vec![0.0; 4];
        assert!(emit_correlation_report(&acc, &names).is_err());
    }

    #[test]
    fn cam_file_round_trip() {
        let c = cam(vec![0.0, 0.25, 1.0, 0.5, 0.75, 0.125], 2, 3);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"CAM1");
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(read_cam_grid(&bytes).unwrap(), (2, 3, c.values));
    }
}
