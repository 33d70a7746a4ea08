//! Pixel containers shared by every stage. Images are `f32` in `[0, 1]`,
//! channel-last (`H × W × C`).

use vton_tensor::Tensor;

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height * width * channels != data.len() {
            return Err(invalid(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, value: &[f32]) {
        debug_assert!(value.iter().all(|v| (0.0..=1.0).contains(v)));
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(value);
    }

    pub fn same_size(&self, other_height: usize, other_width: usize) -> bool {
        self.height == other_height && self.width == other_width
    }

    /// `[1, C, H, W]` engine tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + p] = self.data[p * c + ch];
            }
        }
        Tensor::new(&[1, c, h, w], out)
    }

    /// Read sample `index` of an NCHW tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if index >= n {
            return Err(invalid(format!("sample {index} out of batch of {n}")));
        }
        let base = index * c * h * w;
        let mut data = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                let v = t.data()[base + ch * h * w + p];
                data[p * c + ch] = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            }
        }
        Self::new(h, w, c, data)
    }

    /// Luminance with 0.299 / 0.587 / 0.114 weights; grayscale passes through.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as f64).collect();
        }
        self.data
            .chunks(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn mean_abs_diff_on(&self, other: &ImageTensor, mask: &BinaryMask) -> Option<f64> {
        assert_eq!(self.data.len(), other.data.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for p in 0..self.height * self.width {
            if mask.data[p] == 0 {
                continue;
            }
            for ch in 0..self.channels {
                let i = p * self.channels + ch;
                total += (self.data[i] - other.data[i]).abs() as f64;
                count += 1;
            }
        }
        (count > 0).then(|| total / count as f64)
    }

    /// Quantize to 8 bits per channel.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid("mask values must be exactly 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Threshold a soft mask at 0.5.
    pub fn from_soft(height: usize, width: usize, soft: &[f32]) -> Self {
        assert_eq!(soft.len(), height * width);
        Self {
            height,
            width,
            data: soft.iter().map(|&v| (v >= 0.5) as u8).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Inclusive `(y0, y1, x0, x1)` bounding box of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bbox = Some(match bbox {
                        None => (y, y, x, x),
                        Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                    });
                }
            }
        }
        bbox
    }

    /// `[1, 1, H, W]` engine tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(invalid(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        inter += (p & q) as usize;
        union += (p | q) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
