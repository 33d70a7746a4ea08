//! Training pairs and their on-disk layout:
//!
//! ```text
//! <root>/pairs/<id>/person.png
//!                   garment.png
//!                   garment_mask.png
//!                   parsing.png      palette-indexed, index = label id
//!                   pose.json        [[x, y] | null, ...] per keypoint
//!                   warp.json        optional, synthetic pairs only
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};
use crate::image::{BinaryMask, ImageTensor};
use crate::png_io;
use crate::pose::{default_sigma, make_gaussian_heatmap, PoseHeatmap, NUM_KEYPOINTS};
use crate::segmentation::{SegmentationMap, Vocabulary};
use crate::synth::{GarmentTexture, GroundTruthWarp, SyntheticPair};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub person: ImageTensor,
    pub garment: ImageTensor,
    pub garment_mask: BinaryMask,
    pub parsing_gt: SegmentationMap,
    pub pose: PoseHeatmap,
    /// Equals `person` for self-reconstruction pairs.
    pub tryon_gt: ImageTensor,
}

impl DatasetPair {
    pub fn height(&self) -> usize {
        self.person.height()
    }

    pub fn width(&self) -> usize {
        self.person.width()
    }

    pub fn shapes_agree(&self) -> bool {
        let (h, w) = (self.height(), self.width());
        self.garment.same_size(h, w)
            && self.tryon_gt.same_size(h, w)
            && self.garment_mask.height() == h
            && self.garment_mask.width() == w
            && self.parsing_gt.height() == h
            && self.parsing_gt.width() == w
            && self.pose.height() == h
            && self.pose.width() == w
    }
}

/// Generator facts stored next to a synthetic pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub seed: u64,
    pub warp: GroundTruthWarp,
    pub texture: GarmentTexture,
    pub fashionable: bool,
}

impl From<&SyntheticPair> for SyntheticMeta {
    fn from(p: &SyntheticPair) -> Self {
        Self {
            seed: p.seed,
            warp: p.warp.clone(),
            texture: p.texture.clone(),
            fashionable: p.fashionable,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub id: String,
    pub pair: DatasetPair,
    pub synthetic: Option<SyntheticMeta>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_pair(dir: &Path, pair: &DatasetPair, meta: Option<&SyntheticMeta>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("person.png"), &png_io::encode_image(&pair.person)?)?;
    write_file(&dir.join("garment.png"), &png_io::encode_image(&pair.garment)?)?;
    write_file(&dir.join("garment_mask.png"), &png_io::encode_mask(&pair.garment_mask)?)?;
    write_file(&dir.join("parsing.png"), &png_io::encode_parsing(&pair.parsing_gt)?)?;
    let pose: Vec<Option<[usize; 2]>> = pair.pose.keypoints().iter().map(|k| k.map(|(x, y)| [x, y])).collect();
    write_file(&dir.join("pose.json"), serde_json::to_string(&pose)?.as_bytes())?;
    if let Some(meta) = meta {
        write_file(&dir.join("warp.json"), serde_json::to_string_pretty(meta)?.as_bytes())?;
    }
    Ok(())
}

pub fn read_pair(dir: &Path) -> Result<(DatasetPair, Option<SyntheticMeta>)> {
    let person = png_io::decode_rgb(&read_file(&dir.join("person.png"))?)?;
    let garment = png_io::decode_rgb(&read_file(&dir.join("garment.png"))?)?;
    let garment_mask = png_io::decode_mask(&read_file(&dir.join("garment_mask.png"))?)?;
    let parsing_gt = png_io::decode_parsing(&read_file(&dir.join("parsing.png"))?, Vocabulary::standard())?;
    let pose_path = dir.join("pose.json");
    let raw: Vec<Option<[f64; 2]>> = serde_json::from_slice(&read_file(&pose_path)?)?;
    if raw.len() != NUM_KEYPOINTS {
        return Err(invalid(format!(
            "{}: expected {NUM_KEYPOINTS} keypoints, got {}",
            pose_path.display(),
            raw.len()
        )));
    }
    let (h, w) = (person.height(), person.width());
    let keypoints: Vec<Option<(f64, f64)>> = raw.iter().map(|k| k.map(|[x, y]| (x, y))).collect();
    let pose = make_gaussian_heatmap(&keypoints, h, w, default_sigma(h))?;
    let warp_path = dir.join("warp.json");
    let meta = if warp_path.exists() {
        Some(serde_json::from_slice(&read_file(&warp_path)?)?)
    } else {
        None
    };
    let pair = DatasetPair {
        tryon_gt: person.clone(),
        person,
        garment,
        garment_mask,
        parsing_gt,
        pose,
    };
    if !pair.shapes_agree() {
        return Err(invalid(format!("{}: pair members differ in size", dir.display())));
    }
    Ok((pair, meta))
}

pub fn pair_dir(root: &Path, id: &str) -> PathBuf {
    root.join("pairs").join(id)
}

/// Pair ids are zero-padded seeds.
pub fn synthetic_id(seed: u64) -> String {
    format!("{seed:05}")
}

pub fn write_corpus(root: &Path, pairs: &[SyntheticPair]) -> Result<()> {
    for p in pairs {
        write_pair(&pair_dir(root, &synthetic_id(p.seed)), &p.pair, Some(&SyntheticMeta::from(p)))?;
    }
    Ok(())
}

/// All pairs under `<root>/pairs`, sorted by id.
pub fn read_corpus(root: &Path) -> Result<Vec<LoadedPair>> {
    let pairs = root.join("pairs");
    let mut ids: Vec<String> = fs::read_dir(&pairs)
        .map_err(io_err(&pairs))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let (pair, synthetic) = read_pair(&pair_dir(root, &id))?;
            Ok(LoadedPair { id, pair, synthetic })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_synthetic_pair;

    #[test]
    fn disk_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = generate_synthetic_pair(5, 32, 24).unwrap();
        write_corpus(dir.path(), std::slice::from_ref(&p)).unwrap();
        let loaded = read_corpus(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        let l = &loaded[0];
        assert_eq!(l.id, "00005");
        assert_eq!(l.pair.parsing_gt, p.pair.parsing_gt);
        assert_eq!(l.pair.garment_mask, p.pair.garment_mask);
        assert_eq!(l.pair.pose, p.pair.pose);
        assert_eq!(l.synthetic.as_ref().unwrap(), &SyntheticMeta::from(&p));
        for (a, b) in l.pair.person.data().iter().zip(p.pair.person.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn missing_pose_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = generate_synthetic_pair(1, 16, 16).unwrap();
        let d = dir.path().join("x");
        write_pair(&d, &p.pair, None).unwrap();
        fs::remove_file(d.join("pose.json")).unwrap();
        let err = read_pair(&d).unwrap_err().to_string();
        assert!(err.contains("pose.json"), "{err}");
    }
}
