//! Geometric and photometric preprocessing shared by both modalities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::image::RgbImage;
use super::semantic::SemanticScoreTensor;
use crate::error::{Error, Result};

/// Target length of the smaller image edge before cropping.
pub const RESIZE_EDGE: usize = 256;
/// Side of the square network input.
pub const CROP_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    TrainRandom,
    EvalCenter,
}

/// A square crop at `(top, left)`, optionally mirrored afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

impl CropWindow {
    pub fn apply_rgb(&self, image: &RgbImage) -> Result<RgbImage> {
        let c = image.crop(self.top, self.left, self.size, self.size)?;
        Ok(if self.flip { c.flip_horizontal() } else { c })
    }

    pub fn apply_semantic(&self, sem: &SemanticScoreTensor) -> Result<SemanticScoreTensor> {
        let c = sem.crop(self.top, self.left, self.size, self.size)?;
        Ok(if self.flip { c.flip_horizontal() } else { c })
    }
}

/// Size after scaling the smaller edge to `edge`, preserving aspect ratio.
pub fn smaller_edge_size(height: usize, width: usize, edge: usize) -> Result<(usize, usize)> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension { height, width });
    }
    if height <= width {
        let w = ((width as f64) * edge as f64 / height as f64).round() as usize;
        Ok((edge, w.max(edge)))
    } else {
        let h = ((height as f64) * edge as f64 / width as f64).round() as usize;
        Ok((h.max(edge), edge))
    }
}

pub fn resize_smaller_edge(image: &RgbImage) -> Result<RgbImage> {
    let (h, w) = smaller_edge_size(image.height(), image.width(), RESIZE_EDGE)?;
    image.resize(h, w)
}

/// Crop placement on an already-resized `height × width` image.
pub fn crop_window(height: usize, width: usize, mode: CropMode, rng: &mut impl Rng) -> Result<CropWindow> {
    if height < CROP_SIZE || width < CROP_SIZE {
        return Err(Error::Dimension { height, width });
    }
    let (top, left) = match mode {
        CropMode::EvalCenter => ((height - CROP_SIZE) / 2, (width - CROP_SIZE) / 2),
        CropMode::TrainRandom => (rng.random_range(0..=height - CROP_SIZE), rng.random_range(0..=width - CROP_SIZE)),
    };
    Ok(CropWindow {
        top,
        left,
        size: CROP_SIZE,
        flip: false,
    })
}

/// Scale the smaller edge to 256, then take a 224×224 crop.
pub fn resize_and_crop(image: &RgbImage, mode: CropMode, rng: &mut impl Rng) -> Result<RgbImage> {
    let resized = resize_smaller_edge(image)?;
    crop_window(resized.height(), resized.width(), mode, rng)?.apply_rgb(&resized)
}

/// Four corners, center, then the mirrors of those five in the same order.
pub fn ten_crop_windows(height: usize, width: usize) -> Result<[CropWindow; 10]> {
    if height < CROP_SIZE || width < CROP_SIZE {
        return Err(Error::Dimension { height, width });
    }
    let (dy, dx) = (height - CROP_SIZE, width - CROP_SIZE);
    let base = [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)];
    Ok(std::array::from_fn(|i| {
        let (top, left) = base[i % 5];
        CropWindow {
            top,
            left,
            size: CROP_SIZE,
            flip: i >= 5,
        }
    }))
}

pub fn ten_crop(image: &RgbImage) -> Result<Vec<RgbImage>> {
    let resized = resize_smaller_edge(image)?;
    ten_crop_windows(resized.height(), resized.width())?
        .iter()
        .map(|w| w.apply_rgb(&resized))
        .collect()
}

/// Resize both modalities so the smaller edge is 256 (bilinear for RGB,
/// nearest for label records).
pub fn resize_sample(sample: &Sample) -> Result<Sample> {
    let (h, w) = smaller_edge_size(sample.image.height(), sample.image.width(), RESIZE_EDGE)?;
    Ok(Sample {
        id: sample.id.clone(),
        image: sample.image.resize(h, w)?,
        semantics: sample.semantics.resize_nearest(h, w)?,
        scene_label: sample.scene_label,
    })
}

fn cropped(sample: &Sample, window: &CropWindow) -> Result<Sample> {
    Ok(Sample {
        id: sample.id.clone(),
        image: window.apply_rgb(&sample.image)?,
        semantics: window.apply_semantic(&sample.semantics)?,
        scene_label: sample.scene_label,
    })
}

/// Single center crop of both modalities.
pub fn center_crop_sample(sample: &Sample) -> Result<Sample> {
    let resized = resize_sample(sample)?;
    let window = crop_window(resized.image.height(), resized.image.width(), CropMode::EvalCenter, &mut rand::rng())?;
    cropped(&resized, &window)
}

/// The ten evaluation crops applied identically to RGB and semantics.
pub fn ten_crop_sample(sample: &Sample) -> Result<Vec<Sample>> {
    let resized = resize_sample(sample)?;
    ten_crop_windows(resized.image.height(), resized.image.width())?
        .iter()
        .map(|w| cropped(&resized, w))
        .collect()
}

/// Photometric augmentation settings; each op fires independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub contrast_prob: f64,
    pub contrast_low_percentile: f64,
    pub contrast_high_percentile: f64,
    pub noise_prob: f64,
    pub noise_sigma: f64,
    pub brightness_prob: f64,
    pub brightness_delta: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma_max: 1.5,
            contrast_prob: 0.5,
            contrast_low_percentile: 2.0,
            contrast_high_percentile: 98.0,
            noise_prob: 0.5,
            noise_sigma: 0.02,
            brightness_prob: 0.5,
            brightness_delta: 0.15,
        }
    }
}

impl AugmentConfig {
    /// Geometry only: random crop and flip, no photometric change.
    pub fn geometric_only() -> Self {
        Self {
            blur_prob: 0.0,
            contrast_prob: 0.0,
            noise_prob: 0.0,
            brightness_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Training-time augmentation, deterministic in `seed`.
///
/// RGB and semantics share the random crop and flip decision; blur,
/// contrast normalization, noise and brightness touch the RGB image only.
pub fn augment(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resized = resize_sample(sample)?;
    let mut window = crop_window(resized.image.height(), resized.image.width(), CropMode::TrainRandom, &mut rng)?;
    window.flip = rng.random_bool(cfg.flip_prob);
    let mut out = cropped(&resized, &window)?;
    photometric(&mut out.image, cfg, &mut rng);
    Ok(out)
}

fn photometric(image: &mut RgbImage, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(0.0..=cfg.blur_sigma_max);
        gaussian_blur(image, sigma);
    }
    if rng.random_bool(cfg.contrast_prob) {
        contrast_stretch(image, cfg.contrast_low_percentile, cfg.contrast_high_percentile);
    }
    if rng.random_bool(cfg.noise_prob) {
        let normal = Normal::new(0.0f32, cfg.noise_sigma as f32).expect("noise sigma is finite");
        for v in image.pixels_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    if rng.random_bool(cfg.brightness_prob) {
        let delta = rng.random_range(-cfg.brightness_delta..=cfg.brightness_delta) as f32;
        image.map_values(|v| v + delta);
    }
}

/// Separable Gaussian blur with clamped borders; `sigma < 0.1` is a no-op.
pub fn gaussian_blur(image: &mut RgbImage, sigma: f64) {
    if sigma < 0.1 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (image.height() as isize, image.width() as isize);
    let src = image.pixels().to_vec();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * src[((y * w + sx) * 3) as usize + c];
                }
                tmp[((y * w + x) * 3) as usize + c] = acc;
            }
        }
    }
    let dst = image.pixels_mut();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[((sy * w + x) * 3) as usize + c];
                }
                dst[((y * w + x) * 3) as usize + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
}

/// Linearly map the `[low, high]` percentiles of all values onto `[0, 1]`.
pub fn contrast_stretch(image: &mut RgbImage, low_pct: f64, high_pct: f64) {
    let mut sorted = image.pixels().to_vec();
    sorted.sort_by(f32::total_cmp);
    let at = |p: f64| sorted[((p / 100.0) * (sorted.len() - 1) as f64).round() as usize];
    let (lo, hi) = (at(low_pct), at(high_pct));
    if hi - lo < 1e-6 {
        return;
    }
    image.map_values(|v| (v - lo) / (hi - lo));
}
