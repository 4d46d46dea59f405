//! On-disk dataset layout, manifests and semantic-class restriction.
//!
//! Layout: `<root>/<split>/<scene_class>/<id>.png` with a sibling
//! `<id>.sem`, plus `<root>/manifest.json` listing classes and samples.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use super::semantic::SemanticScoreTensor;
use crate::error::{Error, Result};
use crate::util::{read_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::config("split", format!("expected train or val, got `{other}`"))),
        }
    }
}

/// A loaded example: RGB image, semantic scores and scene label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub semantics: SemanticScoreTensor,
    pub scene_label: usize,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if (self.image.height(), self.image.width()) != (self.semantics.height(), self.semantics.width()) {
            return Err(Error::shape(
                format!("sample {}", self.id),
                format!("{}x{}", self.image.height(), self.image.width()),
                format!("{}x{}", self.semantics.height(), self.semantics.width()),
            ));
        }
        Ok(())
    }
}

/// Where a sample lives, relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub scene_label: usize,
    pub image: String,
    pub semantics: String,
}

/// Coarse grouping of a semantic label by the scenes it appears in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelGroup {
    Indoor,
    Outdoor,
    Both,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub scene_classes: Vec<String>,
    pub num_semantic_classes: usize,
    #[serde(default)]
    pub semantic_labels: Vec<String>,
    #[serde(default)]
    pub semantic_groups: Vec<LabelGroup>,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
}

impl ManifestFile {
    pub fn load(root: &Path) -> Result<Self> {
        read_json(&root.join(MANIFEST_FILE))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_json(&root.join(MANIFEST_FILE), self)
    }
}

/// One split of a dataset, optionally with a restricted semantic label set.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub scene_classes: Vec<String>,
    pub num_semantic_classes: usize,
    pub semantic_labels: Vec<String>,
    pub semantic_groups: Vec<LabelGroup>,
    pub samples: Vec<SampleRef>,
    /// Labels whose scores survive loading; `None` keeps all of them.
    pub semantic_keep: Option<Vec<bool>>,
}

impl DatasetManifest {
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let file = ManifestFile::load(root)?;
        let samples = match split {
            Split::Train => file.train,
            Split::Val => file.val,
        };
        let m = Self {
            root: root.to_path_buf(),
            split,
            scene_classes: file.scene_classes,
            num_semantic_classes: file.num_semantic_classes,
            semantic_labels: file.semantic_labels,
            semantic_groups: file.semantic_groups,
            samples,
            semantic_keep: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_scene_classes(&self) -> usize {
        self.scene_classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_scene_classes();
        if k < 2 {
            return Err(Error::config("num_scene_classes", format!("need at least 2 scene classes, got {k}")));
        }
        if let Some(s) = self.samples.iter().find(|s| s.scene_label >= k) {
            return Err(Error::range("scene label", format!("sample {} has label {} with K={k}", s.id, s.scene_label)));
        }
        Ok(())
    }

    /// Name for semantic label `l`, falling back to its index.
    pub fn semantic_label_name(&self, l: usize) -> String {
        self.semantic_labels.get(l).cloned().unwrap_or_else(|| format!("label_{l}"))
    }

    /// Group tag per label; untagged labels count as `both`.
    pub fn label_partition(&self) -> Vec<LabelGroup> {
        (0..self.num_semantic_classes)
            .map(|l| self.semantic_groups.get(l).copied().unwrap_or(LabelGroup::Both))
            .collect()
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let r = &self.samples[index];
        let image = RgbImage::load_png(&self.root.join(&r.image))?;
        let mut semantics = SemanticScoreTensor::read_sem(&self.root.join(&r.semantics))?;
        if semantics.num_classes() != self.num_semantic_classes {
            return Err(Error::shape(
                format!("semantic classes of {}", r.semantics),
                self.num_semantic_classes,
                semantics.num_classes(),
            ));
        }
        if let Some(keep) = &self.semantic_keep {
            semantics = semantics.restrict(keep);
        }
        let sample = Sample {
            id: r.id.clone(),
            image,
            semantics,
            scene_label: r.scene_label,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

/// The first `subset_size` labels of a seed-determined permutation of `0..L`.
///
/// Prefixes of one permutation are nested, so for a fixed seed the size-50
/// selection is contained in the size-100 one.
pub fn semantic_subset(num_classes: usize, subset_size: usize, seed: u64) -> Result<Vec<usize>> {
    if subset_size == 0 || subset_size > num_classes {
        return Err(Error::range(
            "semantic subset size",
            format!("{subset_size} not in 1..={num_classes}"),
        ));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut kept = order[..subset_size].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Zero the scores of every label outside a seeded random subset.
///
/// The channel count `L` is unchanged; restriction composes with any
/// restriction already present.
pub fn restrict_semantic_classes(manifest: &DatasetManifest, subset_size: usize, seed: u64) -> Result<DatasetManifest> {
    let l = manifest.num_semantic_classes;
    let kept = semantic_subset(l, subset_size, seed)?;
    let mut keep = vec![false; l];
    for k in kept {
        keep[k] = true;
    }
    if let Some(prev) = &manifest.semantic_keep {
        keep.iter_mut().zip(prev).for_each(|(k, p)| *k &= *p);
    }
    let mut out = manifest.clone();
    out.semantic_keep = if keep.iter().all(|&k| k) { None } else { Some(keep) };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(l: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::from("."),
            split: Split::Train,
            scene_classes: vec!["a".into(), "b".into()],
            num_semantic_classes: l,
            semantic_labels: vec![],
            semantic_groups: vec![],
            samples: vec![],
            semantic_keep: None,
        }
    }

    #[test]
    fn subsets_are_nested_and_deterministic() {
        for seed in 0..5 {
            let small = semantic_subset(150, 50, seed).unwrap();
            let large = semantic_subset(150, 100, seed).unwrap();
            assert!(small.iter().all(|l| large.contains(l)));
            assert_eq!(small, semantic_subset(150, 50, seed).unwrap());
        }
        assert_ne!(semantic_subset(150, 50, 1).unwrap(), semantic_subset(150, 50, 2).unwrap());
    }

    #[test]
    fn restriction_bounds() {
        let m = manifest(12);
        assert_eq!(restrict_semantic_classes(&m, 12, 3).unwrap(), m);
        assert!(matches!(restrict_semantic_classes(&m, 0, 3), Err(Error::Range { .. })));
        assert!(matches!(restrict_semantic_classes(&m, 13, 3), Err(Error::Range { .. })));
        let r = restrict_semantic_classes(&m, 4, 3).unwrap();
        assert_eq!(r.semantic_keep.as_ref().unwrap().iter().filter(|&&k| k).count(), 4);
    }

    #[test]
    fn rejects_single_class_and_bad_labels() {
        let mut m = manifest(3);
        m.scene_classes.pop();
        assert!(matches!(m.validate(), Err(Error::Config { .. })));
        let mut m = manifest(3);
        m.samples.push(SampleRef {
            id: "x".into(),
            scene_label: 2,
            image: "x.png".into(),
            semantics: "x.sem".into(),
        });
        assert!(matches!(m.validate(), Err(Error::Range { .. })));
    }
}
