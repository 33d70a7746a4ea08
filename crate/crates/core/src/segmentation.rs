//! Label maps over a named region vocabulary.

use std::sync::Arc;

use vton_tensor::Tensor;

use crate::error::{invalid, Result};
use crate::image::BinaryMask;

/// Indices into [`Vocabulary::standard`].
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const HAT: u8 = 1;
    pub const HAIR: u8 = 2;
    pub const FACE: u8 = 3;
    pub const TORSO_GARMENT: u8 = 4;
    pub const ARMS: u8 = 5;
    pub const PANTS: u8 = 6;
    pub const INDISTINCT: u8 = 7;
}

pub const STANDARD_LABELS: [&str; 8] = [
    "background",
    "hat",
    "hair",
    "face",
    "torso-garment",
    "arms",
    "pants",
    "indistinct",
];

pub const NUM_LABELS: usize = STANDARD_LABELS.len();

/// RGB palette for indexed parsing PNGs, one entry per standard label.
pub const PALETTE: [[u8; 3]; NUM_LABELS] = [
    [0, 0, 0],
    [128, 0, 0],
    [255, 0, 0],
    [0, 85, 0],
    [255, 85, 0],
    [0, 128, 255],
    [0, 0, 85],
    [170, 170, 170],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary(Arc<Vec<String>>);

impl Vocabulary {
    pub fn standard() -> Self {
        Self(Arc::new(STANDARD_LABELS.iter().map(|s| s.to_string()).collect()))
    }

    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() || names.len() > 256 {
            return Err(invalid("vocabulary needs between 1 and 256 labels"));
        }
        Ok(Self(Arc::new(names)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.0.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn require(&self, name: &str) -> Result<u8> {
        self.index_of(name)
            .ok_or_else(|| invalid(format!("label '{name}' missing from vocabulary")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    vocabulary: Vocabulary,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, vocabulary: Vocabulary) -> Result<Self> {
        if labels.len() != height * width {
            return Err(invalid(format!(
                "{height}x{width} map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= vocabulary.len()) {
            return Err(invalid(format!(
                "label {bad} outside vocabulary of {}",
                vocabulary.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            vocabulary,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self::new(height, width, vec![label; height * width], Vocabulary::standard())
            .expect("label inside standard vocabulary")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        assert!((label as usize) < self.vocabulary.len());
        self.labels[y * self.width + x] = label;
    }

    pub fn mask_of(&self, label: u8) -> BinaryMask {
        BinaryMask::new(
            self.height,
            self.width,
            self.labels.iter().map(|&l| (l == label) as u8).collect(),
        )
        .expect("sizes agree")
    }

    pub fn mask_of_any(&self, labels: &[u8]) -> BinaryMask {
        BinaryMask::new(
            self.height,
            self.width,
            self.labels.iter().map(|l| labels.contains(l) as u8).collect(),
        )
        .expect("sizes agree")
    }

    pub fn distinct_labels(&self) -> Vec<u8> {
        let mut seen = vec![false; self.vocabulary.len()];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..seen.len() as u8).filter(|&l| seen[l as usize]).collect()
    }

    /// `[1, L, H, W]` one-hot encoding.
    pub fn to_one_hot(&self) -> Tensor {
        let l = self.vocabulary.len();
        let hw = self.height * self.width;
        let mut data = vec![0.0; l * hw];
        for (p, &lab) in self.labels.iter().enumerate() {
            data[lab as usize * hw + p] = 1.0;
        }
        Tensor::new(&[1, l, self.height, self.width], data)
    }

    /// Per-pixel argmax over the channels of sample `index` of `[N, L, H, W]`.
    pub fn from_logits(t: &Tensor, index: usize, vocabulary: Vocabulary) -> Result<Self> {
        let (n, l, h, w) = t.dims4();
        if index >= n || l != vocabulary.len() {
            return Err(invalid(format!(
                "logits of shape {:?} do not match sample {index} / {} labels",
                t.shape(),
                vocabulary.len()
            )));
        }
        let hw = h * w;
        let base = index * l * hw;
        let labels = (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..l {
                    if t.data()[base + c * hw + p] > t.data()[base + best * hw + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(h, w, labels, vocabulary)
    }

    /// Fraction of pixels where both maps agree.
    pub fn pixel_accuracy(&self, other: &SegmentationMap) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(invalid("segmentation shapes differ"));
        }
        let same = self
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / self.labels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocabulary_has_required_regions() {
        let v = Vocabulary::standard();
        for name in ["background", "face", "hair", "torso-garment", "arms", "indistinct"] {
            assert!(v.index_of(name).is_some(), "{name}");
        }
        assert_eq!(v.index_of("torso-garment"), Some(label::TORSO_GARMENT));
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn rejects_out_of_vocabulary_labels() {
        assert!(SegmentationMap::new(1, 2, vec![0, 8], Vocabulary::standard()).is_err());
    }

    #[test]
    fn one_hot_argmax_round_trip() {
        let map = SegmentationMap::new(2, 2, vec![0, 3, 4, 7], Vocabulary::standard()).unwrap();
        let back = SegmentationMap::from_logits(&map.to_one_hot(), 0, Vocabulary::standard()).unwrap();
        assert_eq!(back, map);
    }
}
