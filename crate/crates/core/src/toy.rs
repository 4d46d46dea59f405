//! Synthetic scenes with paired RGB images and exact semantic tensors.
//!
//! Label 0 is the background. Object labels `1..L` are owned by scene
//! classes round-robin: label `l` belongs to class `(l - 1) % K`. Scene
//! classes come in confusable pairs `(0, 1), (2, 3), ...`. A scene holds a
//! few objects drawn from its own labels, except that with probability
//! `ambiguity` an object is drawn from the partner class instead. The
//! background hue and stripe frequency encode only the position within the
//! pair. Object colors and shapes are random, so the RGB image tells the
//! partners apart but not the pairs, while the semantic tensor identifies
//! the pair and, as ambiguity grows, less and less of the position.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{LabelGroup, ManifestFile, Sample, SampleRef, Split};
use crate::data::image::RgbImage;
use crate::data::semantic::{sparsify, DenseScores};
use crate::error::{Error, Result};
use crate::util::derive_seed;

pub const BACKGROUND_LABEL: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub num_scene_classes: usize,
    pub num_semantic_classes: usize,
    pub samples_per_class: usize,
    pub val_samples_per_class: usize,
    pub ambiguity: f64,
    /// Per-pixel probability of replacing the true semantic label by a random one.
    pub corruption_rate: f64,
    pub objects_per_scene: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            num_scene_classes: 4,
            num_semantic_classes: 12,
            samples_per_class: 40,
            val_samples_per_class: 40,
            ambiguity: 0.5,
            corruption_rate: 0.0,
            objects_per_scene: 2,
            image_size: 128,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let (k, l) = (self.num_scene_classes, self.num_semantic_classes);
        if k < 2 {
            return Err(Error::config("toy.num_scene_classes", "need at least 2"));
        }
        if l < k + 1 {
            return Err(Error::config(
                "toy.num_semantic_classes",
                format!("need a background label plus one object label per class (L >= {}), got {l}", k + 1),
            ));
        }
        if l > u16::MAX as usize {
            return Err(Error::config("toy.num_semantic_classes", "too many labels"));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::config("toy.ambiguity", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::config("toy.corruption_rate", "must lie in [0, 1]"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("toy.samples_per_class", "must be at least 1"));
        }
        if self.objects_per_scene == 0 {
            return Err(Error::config("toy.objects_per_scene", "must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(Error::config("toy.image_size", "must be at least 16"));
        }
        Ok(())
    }

    /// Scene class owning object label `l`; `None` for the background.
    pub fn owner(&self, label: usize) -> Option<usize> {
        (label != BACKGROUND_LABEL).then(|| (label - 1) % self.num_scene_classes)
    }

    /// The class whose objects a scene of `class` borrows. With odd `K` the
    /// last class pairs with its predecessor.
    pub fn partner(&self, class: usize) -> usize {
        let p = class ^ 1;
        if p < self.num_scene_classes {
            p
        } else {
            class - 1
        }
    }

    pub fn own_labels(&self, class: usize) -> Vec<usize> {
        (1..self.num_semantic_classes).filter(|&l| self.owner(l) == Some(class)).collect()
    }

    pub fn scene_class_names(&self) -> Vec<String> {
        (0..self.num_scene_classes).map(|c| format!("scene_{c}")).collect()
    }

    pub fn semantic_label_names(&self) -> Vec<String> {
        (0..self.num_semantic_classes)
            .map(|l| if l == BACKGROUND_LABEL { "background".into() } else { format!("object_{l:02}") })
            .collect()
    }

    /// First half of the scene classes count as indoor, the rest as outdoor;
    /// objects inherit their owner's group.
    pub fn label_groups(&self) -> Vec<LabelGroup> {
        (0..self.num_semantic_classes)
            .map(|l| match self.owner(l) {
                None => LabelGroup::Both,
                Some(c) if c < self.num_scene_classes / 2 => LabelGroup::Indoor,
                Some(_) => LabelGroup::Outdoor,
            })
            .collect()
    }

    fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.samples_per_class,
            Split::Val => self.val_samples_per_class,
        }
    }
}

pub fn sample_id(split: Split, class: usize, index: usize) -> String {
    format!("{}_{class}_{index:04}", split.as_str())
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
}

struct Placed {
    label: usize,
    shape: Shape,
    top: f32,
    left: f32,
    height: f32,
    width: f32,
    color: [f32; 3],
}

impl Placed {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (v, u) = ((y - self.top) / self.height, (x - self.left) / self.width);
        if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&u) {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => (2.0 * u - 1.0).powi(2) + (2.0 * v - 1.0).powi(2) <= 1.0,
            Shape::Triangle => (2.0 * u - 1.0).abs() <= v,
        }
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Render sample `index` of `class` in `split`. Deterministic in the spec seed.
pub fn render_sample(spec: &ToySpec, split: Split, class: usize, index: usize) -> Result<Sample> {
    let (l, n) = (spec.num_semantic_classes, spec.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[&"toy", &split.as_str(), &class, &index]));

    let style = class % 2;
    let hue = 0.1 + 0.45 * style as f32 + rng.random_range(-0.04..0.04);
    let stripes = 2.0 + 3.0 * style as f32 + rng.random_range(-0.3..0.3);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let base = hsv(hue, 0.55, 0.7);

    let own = spec.own_labels(class);
    let borrowed = spec.own_labels(spec.partner(class));
    let objects: Vec<Placed> = (0..spec.objects_per_scene)
        .map(|_| {
            let pool = if rng.random_bool(spec.ambiguity) { &borrowed } else { &own };
            let label = pool[rng.random_range(0..pool.len())];
            let height = rng.random_range(0.25..0.45) * n as f32;
            let width = rng.random_range(0.25..0.45) * n as f32;
            Placed {
                label,
                shape: [Shape::Rect, Shape::Ellipse, Shape::Triangle][rng.random_range(0..3)],
                top: rng.random_range(0.0..n as f32 - height),
                left: rng.random_range(0.0..n as f32 - width),
                height,
                width,
                color: hsv(rng.random_range(0.0..1.0), 0.8, rng.random_range(0.45..1.0)),
            }
        })
        .collect();

    let mut labels = vec![BACKGROUND_LABEL; n * n];
    let mut pixels = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        let wave = 0.12 * (std::f32::consts::TAU * stripes * y as f32 / n as f32 + phase).sin();
        for x in 0..n {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let mut px = base.map(|c| c + wave);
            // Later objects are drawn on top.
            if let Some(o) = objects.iter().rev().find(|o| o.contains(fy, fx)) {
                px = o.color;
                labels[y * n + x] = o.label;
            }
            let noise = rng.random_range(-0.03..0.03);
            pixels.extend(px.map(|c| quantize(c + noise)));
        }
    }
    if spec.corruption_rate > 0.0 {
        for lab in labels.iter_mut() {
            if rng.random_bool(spec.corruption_rate) {
                *lab = rng.random_range(0..l);
            }
        }
    }
    let mut dense = vec![0.0f32; n * n * l];
    for (px, &lab) in dense.chunks_exact_mut(l).zip(&labels) {
        px[lab] = 1.0;
    }
    let id = sample_id(split, class, index);
    Ok(Sample {
        image: RgbImage::new(n, n, pixels, format!("{id}.png"))?,
        semantics: sparsify(&DenseScores::new(n, n, l, dense)?),
        scene_label: class,
        id,
    })
}

/// All samples of a split in class-major order, without touching disk.
pub fn render_split(spec: &ToySpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    let per = spec.per_class(split);
    let mut out = Vec::with_capacity(per * spec.num_scene_classes);
    for class in 0..spec.num_scene_classes {
        for i in 0..per {
            out.push(render_sample(spec, split, class, i)?);
        }
    }
    Ok(out)
}

/// Write both splits and `manifest.json` under `root`.
pub fn generate(spec: &ToySpec, root: &Path) -> Result<ManifestFile> {
    spec.validate()?;
    let names = spec.scene_class_names();
    let mut refs = [Vec::new(), Vec::new()];
    for (slot, split) in [Split::Train, Split::Val].into_iter().enumerate() {
        for (class, name) in names.iter().enumerate() {
            let dir = root.join(split.as_str()).join(name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..spec.per_class(split) {
                let s = render_sample(spec, split, class, i)?;
                let rel = format!("{}/{name}/{}", split.as_str(), s.id);
                s.image.save_png(&root.join(format!("{rel}.png")))?;
                s.semantics.write_sem(&root.join(format!("{rel}.sem")))?;
                refs[slot].push(SampleRef {
                    id: s.id,
                    scene_label: class,
                    image: format!("{rel}.png"),
                    semantics: format!("{rel}.sem"),
                });
            }
        }
        log::info!("wrote {} {} samples", refs[slot].len(), split.as_str());
    }
    let [train, val] = refs;
    let manifest = ManifestFile {
        scene_classes: names,
        num_semantic_classes: spec.num_semantic_classes,
        semantic_labels: spec.semantic_label_names(),
        semantic_groups: spec.label_groups(),
        train,
        val,
    };
    manifest.save(root)?;
    Ok(manifest)
}

/// Classify a sample from its bag of top-1 object labels alone: each
/// non-background pixel votes for its label's owner; ties go to the lower
/// class index.
pub fn semantic_bag_oracle(spec: &ToySpec, sample: &Sample) -> usize {
    let mut votes = vec![0usize; spec.num_scene_classes];
    let s = &sample.semantics;
    for y in 0..s.height() {
        for x in 0..s.width() {
            if let Some(c) = spec.owner(s.top1_label(y, x) as usize) {
                votes[c] += 1;
            }
        }
    }
    let best = *votes.iter().max().unwrap_or(&0);
    votes.iter().position(|&v| v == best).unwrap_or(0)
}

/// Percentage of samples the bag oracle labels correctly.
pub fn semantic_bag_accuracy(spec: &ToySpec, samples: &[Sample]) -> f64 {
    let hits = samples.iter().filter(|s| semantic_bag_oracle(spec, s) == s.scene_label).count();
    100.0 * hits as f64 / samples.len().max(1) as f64
}
