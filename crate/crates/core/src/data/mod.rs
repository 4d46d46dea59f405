//! Loading, preprocessing and batching of paired RGB + semantic samples.

pub mod batch;
pub mod dataset;
pub mod image;
pub mod semantic;
pub mod transform;

pub use dataset::{restrict_semantic_classes, DatasetManifest, LabelGroup, ManifestFile, Sample, SampleRef, Split};
pub use image::RgbImage;
pub use semantic::{densify, sparsify, DenseScores, SemanticScoreTensor};
pub use transform::{augment, resize_and_crop, ten_crop, AugmentConfig, CropMode};
