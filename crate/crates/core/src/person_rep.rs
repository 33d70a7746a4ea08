//! Clothing-agnostic person representation: the garment and arms are fused
//! into one `indistinct` region and their pixels blanked, while face, hair
//! and background survive untouched.

use crate::error::{invalid, Result};
use crate::image::ImageTensor;
use crate::pose::PoseHeatmap;
use crate::segmentation::SegmentationMap;

/// Fill value for every pixel outside the preserved regions.
pub const NEUTRAL_FILL: f32 = 0.5;

pub const FUSED_REGIONS: [&str; 2] = ["torso-garment", "arms"];
pub const PRESERVED_REGIONS: [&str; 3] = ["face", "hair", "background"];

#[derive(Clone, Debug, PartialEq)]
pub struct PersonRepresentation {
    pub fuzzy_parsing: SegmentationMap,
    pub pose: PoseHeatmap,
    pub identity_image: ImageTensor,
}

pub fn build_person_representation(
    person: &ImageTensor,
    parsing: &SegmentationMap,
    pose: &PoseHeatmap,
) -> Result<PersonRepresentation> {
    let (h, w) = (person.height(), person.width());
    if parsing.height() != h || parsing.width() != w || pose.height() != h || pose.width() != w {
        return Err(invalid(format!(
            "person {h}x{w}, parsing {}x{} and pose {}x{} must agree",
            parsing.height(),
            parsing.width(),
            pose.height(),
            pose.width()
        )));
    }
    let vocab = parsing.vocabulary();
    let fused = FUSED_REGIONS
        .iter()
        .map(|n| vocab.require(n))
        .collect::<Result<Vec<u8>>>()?;
    let preserved = PRESERVED_REGIONS
        .iter()
        .map(|n| vocab.require(n))
        .collect::<Result<Vec<u8>>>()?;
    let indistinct = vocab.require("indistinct")?;

    let mut fuzzy = parsing.clone();
    let mut identity = ImageTensor::filled(h, w, person.channels(), NEUTRAL_FILL);
    for y in 0..h {
        for x in 0..w {
            let l = parsing.get(y, x);
            if fused.contains(&l) {
                fuzzy.set(y, x, indistinct);
            }
            if preserved.contains(&l) {
                identity.set_pixel(y, x, person.pixel(y, x));
            }
        }
    }
    Ok(PersonRepresentation {
        fuzzy_parsing: fuzzy,
        pose: pose.clone(),
        identity_image: identity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{label, Vocabulary};
    use crate::synth::generate_synthetic_pair;

    fn blank_pose(h: usize, w: usize) -> PoseHeatmap {
        crate::pose::make_gaussian_heatmap(&[None; 8], h, w, 1.0).unwrap()
    }

    #[test]
    fn no_garment_pixels_leaves_parsing_alone() {
        let mut parsing = SegmentationMap::filled(4, 4, label::BACKGROUND);
        parsing.set(1, 1, label::FACE);
        parsing.set(2, 2, label::PANTS);
        let person = ImageTensor::filled(4, 4, 3, 0.2);
        let rep = build_person_representation(&person, &parsing, &blank_pose(4, 4)).unwrap();
        assert_eq!(rep.fuzzy_parsing, parsing);
    }

    #[test]
    fn all_torso_becomes_indistinct() {
        let parsing = SegmentationMap::filled(3, 5, label::TORSO_GARMENT);
        let person = ImageTensor::filled(3, 5, 3, 0.9);
        let rep = build_person_representation(&person, &parsing, &blank_pose(3, 5)).unwrap();
        assert_eq!(rep.fuzzy_parsing, SegmentationMap::filled(3, 5, label::INDISTINCT));
        assert!(rep.identity_image.data().iter().all(|&v| v == NEUTRAL_FILL));
    }

    #[test]
    fn synthetic_identity_pixels_are_exact() {
        let p = generate_synthetic_pair(0, 64, 48).unwrap().pair;
        let rep = build_person_representation(&p.person, &p.parsing_gt, &p.pose).unwrap();
        let keep = p.parsing_gt.mask_of_any(&[label::FACE, label::HAIR]);
        assert!(keep.count() > 0);
        for y in 0..64 {
            for x in 0..48 {
                if keep.get(y, x) {
                    assert_eq!(rep.identity_image.pixel(y, x), p.person.pixel(y, x));
                }
                if p.parsing_gt.get(y, x) == label::TORSO_GARMENT {
                    assert_eq!(rep.identity_image.pixel(y, x), &[NEUTRAL_FILL; 3]);
                    assert_eq!(rep.fuzzy_parsing.get(y, x), label::INDISTINCT);
                }
            }
        }
    }

    #[test]
    fn idempotent_on_parsing() {
        let p = generate_synthetic_pair(4, 32, 24).unwrap().pair;
        let once = build_person_representation(&p.person, &p.parsing_gt, &p.pose).unwrap();
        let twice =
            build_person_representation(&once.identity_image, &once.fuzzy_parsing, &once.pose).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn missing_label_is_invalid() {
        let vocab = Vocabulary::new(vec!["background".into(), "face".into()]).unwrap();
        let parsing = SegmentationMap::new(2, 2, vec![0; 4], vocab).unwrap();
        let person = ImageTensor::filled(2, 2, 3, 0.0);
        let err = build_person_representation(&person, &parsing, &blank_pose(2, 2)).unwrap_err();
        assert!(matches!(err, crate::VtonError::InvalidArgument(_)));
    }

    #[test]
    fn shape_mismatch_is_invalid() {
        let parsing = SegmentationMap::filled(2, 2, 0);
        let person = ImageTensor::filled(2, 3, 3, 0.0);
        assert!(build_person_representation(&person, &parsing, &blank_pose(2, 2)).is_err());
    }
}
