//! Upper-body keypoints rendered as Gaussian heatmaps.

use vton_tensor::Tensor;

use crate::error::{invalid, Result};

pub const KEYPOINT_NAMES: [&str; 8] = [
    "head",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

pub const NUM_KEYPOINTS: usize = KEYPOINT_NAMES.len();

/// 2 px at 256 rows, scaled with image height.
pub fn default_sigma(height: usize) -> f64 {
    2.0 * height as f64 / 256.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseHeatmap {
    height: usize,
    width: usize,
    sigma: f64,
    /// `(x, y)` pixel per keypoint, `None` when absent.
    keypoints: Vec<Option<(usize, usize)>>,
    /// `[K, H, W]`
    data: Vec<f32>,
}

impl PoseHeatmap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    pub fn keypoints(&self) -> &[Option<(usize, usize)>] {
        &self.keypoints
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn value(&self, keypoint: usize, y: usize, x: usize) -> f32 {
        self.data[(keypoint * self.height + y) * self.width + x]
    }

    /// `[1, K, H, W]`
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.keypoints.len(), self.height, self.width],
            self.data.clone(),
        )
    }
}

/// Render channel `k` as `exp(-((x - x_k)^2 + (y - y_k)^2) / (2 sigma^2))`.
///
/// Keypoints are `(x, y)` and snapped to the nearest pixel so that every
/// visible channel peaks at exactly 1.0.
pub fn make_gaussian_heatmap(
    keypoints: &[Option<(f64, f64)>],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<PoseHeatmap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(invalid("heatmap needs a non-empty image"));
    }
    let mut snapped = Vec::with_capacity(keypoints.len());
    for (k, kp) in keypoints.iter().enumerate() {
        snapped.push(match *kp {
            None => None,
            Some((x, y)) => {
                let (xi, yi) = (x.round(), y.round());
                if !(xi >= 0.0 && yi >= 0.0 && (xi as usize) < width && (yi as usize) < height) {
                    return Err(invalid(format!(
                        "keypoint {k} at ({x}, {y}) lies outside the {height}x{width} image"
                    )));
                }
                Some((xi as usize, yi as usize))
            }
        });
    }
    let denom = 2.0 * sigma * sigma;
    let mut data = vec![0.0f32; keypoints.len() * height * width];
    for (k, kp) in snapped.iter().enumerate() {
        let Some((kx, ky)) = *kp else { continue };
        let plane = &mut data[k * height * width..(k + 1) * height * width];
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 - kx as f64;
                let dy = y as f64 - ky as f64;
                plane[y * width + x] = (-(dx * dx + dy * dy) / denom).exp() as f32;
            }
        }
    }
    Ok(PoseHeatmap {
        height,
        width,
        sigma,
        keypoints: snapped,
        data,
    })
}
