//! Stacking preprocessed samples into network input tensors.

use semattn_nn::{Scalar, Tensor};

use super::dataset::Sample;
use crate::error::{Error, Result};

/// Per-channel mean and standard deviation applied to RGB network inputs.
pub const RGB_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Network-ready tensors for a batch of equally sized samples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub rgb: Tensor<T>,
    pub semantics: Tensor<T>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Planar, mean/std-normalized RGB and densified semantic scores.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::range("batch", "no samples"))?;
        let (h, w) = (first.image.height(), first.image.width());
        let l = first.semantics.num_classes();
        let plane = h * w;
        let mut rgb = Tensor::zeros([samples.len(), 3, h, w]);
        let mut semantics = Tensor::zeros([samples.len(), l, h, w]);
        for (i, s) in samples.iter().enumerate() {
            s.validate()?;
            if (s.image.height(), s.image.width(), s.semantics.num_classes()) != (h, w, l) {
                return Err(Error::shape(
                    format!("batch item {}", s.id),
                    format!("{h}x{w} with L={l}"),
                    format!("{}x{} with L={}", s.image.height(), s.image.width(), s.semantics.num_classes()),
                ));
            }
            let dst = rgb.item_mut(i);
            for (p, px) in s.image.pixels().chunks_exact(3).enumerate() {
                for c in 0..3 {
                    dst[c * plane + p] = <T as From<f32>>::from((px[c] - RGB_MEAN[c]) / RGB_STD[c]);
                }
            }
            s.semantics.densify_planar_into(semantics.item_mut(i));
        }
        Ok(Self {
            rgb,
            semantics,
            labels: samples.iter().map(|s| s.scene_label).collect(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::RgbImage;
    use crate::data::semantic::SemanticScoreTensor;

    #[test]
    fn planar_layout_and_normalization() {
        let image = RgbImage::from_fn(2, 3, |y, x| [0.485, (y * 3 + x) as f32 / 10.0, 0.406]).unwrap();
        let semantics = SemanticScoreTensor::uniform_label(2, 3, 4, 2).unwrap();
        let s = Sample {
            id: "a".into(),
            image,
            semantics,
            scene_label: 1,
        };
        let b = Batch::<f64>::from_samples(&[s.clone(), s]).unwrap();
        assert_eq!(b.rgb.shape(), [2, 3, 2, 3]);
        assert_eq!(b.semantics.shape(), [2, 4, 2, 3]);
        assert!(b.rgb.item(1)[..6].iter().all(|&v| v == 0.0));
        let g = &b.rgb.item(0)[6..12];
        assert!((g[4] - (0.4 - 0.456) / 0.224).abs() < 1e-6);
        let sem = b.semantics.item(0);
        assert!(sem[12..18].iter().all(|&v| v == 1.0));
        assert_eq!(sem.iter().sum::<f64>(), 6.0);
        assert_eq!(b.labels, vec![1, 1]);
    }
}
