use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of labels kept per pixel after sparsification.
pub const TOP_K: usize = 3;

/// Placeholder label for unused slots when fewer than three classes exist.
pub const EMPTY_LABEL: u16 = u16::MAX;

const SEM_MAGIC: &[u8; 4] = b"SEM1";
const RECORD_BYTES: usize = TOP_K * 2 + TOP_K * 4;

/// Per-pixel score vectors over `L` semantic classes, pixel-major
/// (`values[(y * width + x) * L + label]`).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseScores {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub values: Vec<f32>,
}

impl DenseScores {
    pub fn new(height: usize, width: usize, num_classes: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * num_classes {
            return Err(Error::shape("dense scores", height * width * num_classes, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::range("semantic score", format!("{v} is not a nonnegative finite value")));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            values,
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let l = self.num_classes;
        &self.values[(y * self.width + x) * l..][..l]
    }
}

/// Sparsified segmentation scores: the three best labels of every pixel.
///
/// Slots are ordered by score (descending), ties by label index
/// (ascending). Unused slots (only when `L < 3`) hold [`EMPTY_LABEL`].
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticScoreTensor {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<[u16; TOP_K]>,
    scores: Vec<[f32; TOP_K]>,
}

impl SemanticScoreTensor {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        labels: Vec<[u16; TOP_K]>,
        scores: Vec<[f32; TOP_K]>,
    ) -> Result<Self> {
        let t = Self {
            height,
            width,
            num_classes,
            labels,
            scores,
        };
        t.validate()?;
        Ok(t)
    }

    /// Every pixel assigned label 0 with score 1.
    pub fn uniform_label(height: usize, width: usize, num_classes: usize, label: u16) -> Result<Self> {
        let mut dense = vec![0.0; height * width * num_classes];
        for px in dense.chunks_exact_mut(num_classes) {
            px[label as usize] = 1.0;
        }
        Ok(sparsify(&DenseScores::new(height, width, num_classes, dense)?))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Dimension {
                height: self.height,
                width: self.width,
            });
        }
        if self.num_classes == 0 || self.num_classes >= EMPTY_LABEL as usize {
            return Err(Error::Format(format!("unsupported class count {}", self.num_classes)));
        }
        let n = self.height * self.width;
        if self.labels.len() != n || self.scores.len() != n {
            return Err(Error::shape("semantic records", n, self.labels.len().min(self.scores.len())));
        }
        for (i, (labels, scores)) in self.labels.iter().zip(&self.scores).enumerate() {
            for s in 0..TOP_K {
                let (l, v) = (labels[s], scores[s]);
                if l == EMPTY_LABEL {
                    if v != 0.0 || s < self.num_classes.min(TOP_K) {
                        return Err(Error::Format(format!("pixel {i}: misplaced empty slot")));
                    }
                    continue;
                }
                if l as usize >= self.num_classes {
                    return Err(Error::Format(format!("pixel {i}: label {l} >= L={}", self.num_classes)));
                }
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(Error::Format(format!("pixel {i}: score {v} outside [0, 1]")));
                }
                if labels[..s].contains(&l) {
                    return Err(Error::Format(format!("pixel {i}: duplicate label {l}")));
                }
                if s > 0 && v > scores[s - 1] {
                    return Err(Error::Format(format!("pixel {i}: scores not nonincreasing")));
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[[u16; TOP_K]] {
        &self.labels
    }

    pub fn scores(&self) -> &[[f32; TOP_K]] {
        &self.scores
    }

    pub fn record(&self, y: usize, x: usize) -> ([u16; TOP_K], [f32; TOP_K]) {
        let i = y * self.width + x;
        (self.labels[i], self.scores[i])
    }

    /// Label in the first (highest-scoring) slot.
    pub fn top1_label(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x][0]
    }

    /// Sum of all kept scores.
    pub fn total_mass(&self) -> f64 {
        self.scores.iter().flatten().map(|&v| f64::from(v)).sum()
    }

    /// Write scores into a planar `L × H × W` buffer (which must be zeroed).
    pub fn densify_planar_into<T: Copy + From<f32>>(&self, out: &mut [T]) {
        let plane = self.height * self.width;
        debug_assert_eq!(out.len(), plane * self.num_classes);
        for (i, (labels, scores)) in self.labels.iter().zip(&self.scores).enumerate() {
            for s in 0..TOP_K {
                if labels[s] != EMPTY_LABEL && scores[s] != 0.0 {
                    out[labels[s] as usize * plane + i] = T::from(scores[s]);
                }
            }
        }
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension { height, width });
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let mut labels = Vec::with_capacity(height * width);
        let mut scores = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            let sy = sy.min(self.height - 1);
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
                let i = sy * self.width + sx.min(self.width - 1);
                labels.push(self.labels[i]);
                scores.push(self.scores[i]);
            }
        }
        Ok(Self {
            height,
            width,
            num_classes: self.num_classes,
            labels,
            scores,
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::range(
                "crop window",
                format!("{height}x{width} at ({top},{left}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let mut labels = Vec::with_capacity(height * width);
        let mut scores = Vec::with_capacity(height * width);
        for y in top..top + height {
            let r = y * self.width + left..y * self.width + left + width;
            labels.extend_from_slice(&self.labels[r.clone()]);
            scores.extend_from_slice(&self.scores[r]);
        }
        Ok(Self {
            height,
            width,
            num_classes: self.num_classes,
            labels,
            scores,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            let r = y * self.width..(y + 1) * self.width;
            out.labels[r.clone()].reverse();
            out.scores[r].reverse();
        }
        out
    }

    /// Zero the scores of labels for which `keep[label]` is false, then restore
    /// slot ordering.
    pub fn restrict(&self, keep: &[bool]) -> Self {
        let mut out = self.clone();
        for (labels, scores) in out.labels.iter_mut().zip(out.scores.iter_mut()) {
            for s in 0..TOP_K {
                if labels[s] != EMPTY_LABEL && !keep[labels[s] as usize] {
                    scores[s] = 0.0;
                }
            }
            let mut slots: Vec<(u16, f32)> = labels.iter().copied().zip(scores.iter().copied()).collect();
            slots.sort_by(|a, b| slot_order(*a, *b));
            for (s, (l, v)) in slots.into_iter().enumerate() {
                labels[s] = l;
                scores[s] = v;
            }
        }
        out
    }

    /// Serialize in the `.sem` layout: magic, `u32` height, width, L, then
    /// row-major `{3 × u16 label, 3 × f32 score}` records, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.labels.len() * RECORD_BYTES);
        out.extend_from_slice(SEM_MAGIC);
        for v in [self.height, self.width, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (labels, scores) in self.labels.iter().zip(&self.scores) {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
            for s in scores {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != SEM_MAGIC {
            return Err(Error::Format("missing SEM1 header".into()));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
        let (height, width, num_classes) = (word(4), word(8), word(12));
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        let body = &bytes[16..];
        if body.len() != n * RECORD_BYTES {
            return Err(Error::Format(format!(
                "expected {} record bytes for {height}x{width}, found {}",
                n * RECORD_BYTES,
                body.len()
            )));
        }
        let mut labels = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for rec in body.chunks_exact(RECORD_BYTES) {
            let mut l = [0u16; TOP_K];
            let mut s = [0f32; TOP_K];
            for k in 0..TOP_K {
                l[k] = u16::from_le_bytes([rec[2 * k], rec[2 * k + 1]]);
                let o = 2 * TOP_K + 4 * k;
                s[k] = f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
            }
            labels.push(l);
            scores.push(s);
        }
        Self::new(height, width, num_classes, labels, scores)
    }

    pub fn read_sem(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write_sem(&self, path: &Path) -> Result<()> {
        crate::util::atomic_write(path, &self.to_bytes())
    }
}

fn slot_order(a: (u16, f32), b: (u16, f32)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Keep the three largest scores of every pixel (ties to the lower label),
/// without renormalizing. With `L < 3` every entry survives.
pub fn sparsify(dense: &DenseScores) -> SemanticScoreTensor {
    let l = dense.num_classes;
    let n = dense.height * dense.width;
    let mut labels = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut order: Vec<u16> = Vec::with_capacity(l);
    for px in dense.values.chunks_exact(l.max(1)) {
        order.clear();
        order.extend(0..l as u16);
        // Partial selection is enough: only the first three positions matter.
        let keep = TOP_K.min(l);
        if keep < l {
            order.select_nth_unstable_by(keep - 1, |&a, &b| slot_order((a, px[a as usize]), (b, px[b as usize])));
        }
        order[..keep].sort_by(|&a, &b| slot_order((a, px[a as usize]), (b, px[b as usize])));
        let mut lab = [EMPTY_LABEL; TOP_K];
        let mut sc = [0.0f32; TOP_K];
        for (s, &label) in order[..keep].iter().enumerate() {
            lab[s] = label;
            sc[s] = px[label as usize];
        }
        labels.push(lab);
        scores.push(sc);
    }
    SemanticScoreTensor {
        height: dense.height,
        width: dense.width,
        num_classes: l,
        labels,
        scores,
    }
}

/// Scatter kept scores back into length-`L` vectors; all other entries are zero.
pub fn densify(sparse: &SemanticScoreTensor) -> Result<DenseScores> {
    let l = sparse.num_classes;
    let mut values = vec![0.0f32; sparse.height * sparse.width * l];
    for (i, (labels, scores)) in sparse.labels.iter().zip(&sparse.scores).enumerate() {
        for s in 0..TOP_K {
            if labels[s] == EMPTY_LABEL {
                continue;
            }
            if labels[s] as usize >= l {
                return Err(Error::Format(format!("label {} >= L={l}", labels[s])));
            }
            values[i * l + labels[s] as usize] = scores[s];
        }
    }
    DenseScores::new(sparse.height, sparse.width, l, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_pixel(v: &[f32]) -> DenseScores {
        DenseScores::new(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn keeps_top_three_with_original_values() {
        let s = sparsify(&one_pixel(&[0.40, 0.30, 0.10, 0.15, 0.05]));
        assert_eq!(s.labels()[0], [0, 1, 3]);
        assert_eq!(s.scores()[0], [0.40, 0.30, 0.15]);
        let d = densify(&s).unwrap();
        assert_eq!(d.values, vec![0.40, 0.30, 0.0, 0.15, 0.0]);
    }

    #[test]
    fn ties_go_to_lowest_label() {
        let s = sparsify(&one_pixel(&[0.2; 5]));
        assert_eq!(s.labels()[0], [0, 1, 2]);
        let s = sparsify(&one_pixel(&[0.0, 0.0, 0.0, 1.0, 0.0]));
        assert_eq!(s.labels()[0], [3, 0, 1]);
        assert_eq!(s.scores()[0], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn fewer_than_three_classes_keeps_everything() {
        let s = sparsify(&one_pixel(&[0.3, 0.7]));
        assert_eq!(s.labels()[0], [1, 0, EMPTY_LABEL]);
        assert_eq!(densify(&s).unwrap().values, vec![0.3, 0.7]);
        s.validate().unwrap();
    }

    #[test]
    fn empty_scores_densify_to_zero() {
        let s = sparsify(&one_pixel(&[0.0; 4]));
        assert!(densify(&s).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn densify_rejects_out_of_range_label() {
        let bad = SemanticScoreTensor {
            height: 1,
            width: 1,
            num_classes: 2,
            labels: vec![[5, 0, 1]],
            scores: vec![[0.5, 0.1, 0.0]],
        };
        assert!(matches!(densify(&bad), Err(Error::Format(_))));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sem_bytes_layout() {
        let s = sparsify(&DenseScores::new(1, 2, 4, vec![0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.5, 0.25]).unwrap());
        let b = s.to_bytes();
        assert_eq!(&b[..4], b"SEM1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 4);
        assert_eq!(b.len(), 16 + 2 * 18);
        // first record: labels 1, 0, 2
        assert_eq!(&b[16..22], &[1, 0, 0, 0, 2, 0]);
        assert_eq!(f32::from_le_bytes(b[22..26].try_into().unwrap()), 0.9);
        assert_eq!(SemanticScoreTensor::from_bytes(&b).unwrap(), s);
        assert!(SemanticScoreTensor::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn restrict_zeroes_and_reorders() {
        let s = sparsify(&one_pixel(&[0.5, 0.3, 0.2, 0.0]));
        let r = s.restrict(&[false, true, true, true]);
        assert_eq!(r.labels()[0], [1, 2, 0]);
        assert_eq!(r.scores()[0], [0.3, 0.2, 0.0]);
        r.validate().unwrap();
    }

    #[test]
    fn nearest_resize_doubles_pixels() {
        let s = sparsify(&DenseScores::new(1, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let r = s.resize_nearest(2, 4).unwrap();
        let tops: Vec<u16> = (0..4).map(|x| r.top1_label(1, x)).collect();
        assert_eq!(tops, vec![0, 0, 2, 2]);
    }

    fn dense_strategy() -> impl Strategy<Value = DenseScores> {
        (1usize..4, 1usize..4, 1usize..7).prop_flat_map(|(h, w, l)| {
            proptest::collection::vec(prop_oneof![Just(0.0f32), 0.0f32..1.0], h * w * l)
                .prop_map(move |v| DenseScores::new(h, w, l, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn sparsify_is_idempotent(d in dense_strategy()) {
            let s = sparsify(&d);
            prop_assert_eq!(sparsify(&densify(&s).unwrap()), s.clone());
            s.validate().unwrap();
        }

        #[test]
        fn nonzero_count_is_min_of_three_and_input(d in dense_strategy()) {
            let s = sparsify(&d);
            for (i, sc) in s.scores().iter().enumerate() {
                let input_nz = d.values[i * d.num_classes..(i + 1) * d.num_classes].iter().filter(|&&v| v != 0.0).count();
                prop_assert_eq!(sc.iter().filter(|&&v| v != 0.0).count(), input_nz.min(TOP_K));
            }
        }

        #[test]
        fn kept_mass_survives_densify(d in dense_strategy()) {
            let s = sparsify(&d);
            let dd = densify(&s).unwrap();
            let mass: f64 = dd.values.iter().map(|&v| f64::from(v)).sum();
            prop_assert!((mass - s.total_mass()).abs() <= 1e-12 * mass.max(1.0));
        }
    }
}
