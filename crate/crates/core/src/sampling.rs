//! Bilinear sampling of planar (`C × H × W`) images at continuous
//! coordinates, with border clamping. Coordinates are in pixel units with
//! integer values at pixel centres.

/// Corner indices and weights for one sample point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
    pub fy: f64,
    pub fx: f64,
    /// Derivative of the clamped coordinate w.r.t. the raw one (0 or 1).
    pub dy_live: f64,
    pub dx_live: f64,
}

impl BilinearTap {
    pub fn new(height: usize, width: usize, y: f64, x: f64) -> Self {
        let (y0, y1, fy, dy_live) = axis(height, y);
        let (x0, x1, fx, dx_live) = axis(width, x);
        Self {
            y0,
            x0,
            y1,
            x1,
            fy,
            fx,
            dy_live,
            dx_live,
        }
    }

    /// `(index offsets within a plane, weights)` of the four corners.
    pub fn corners(&self, width: usize) -> [(usize, f64); 4] {
        [
            (self.y0 * width + self.x0, (1.0 - self.fy) * (1.0 - self.fx)),
            (self.y0 * width + self.x1, (1.0 - self.fy) * self.fx),
            (self.y1 * width + self.x0, self.fy * (1.0 - self.fx)),
            (self.y1 * width + self.x1, self.fy * self.fx),
        ]
    }
}

fn axis(len: usize, v: f64) -> (usize, usize, f64, f64) {
    assert!(len > 0);
    if len == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let max = (len - 1) as f64;
    let (c, live) = if v.is_nan() || v < 0.0 {
        (0.0, 0.0)
    } else if v > max {
        (max, 0.0)
    } else {
        (v, 1.0)
    };
    let i0 = (c.floor() as usize).min(len - 2);
    (i0, i0 + 1, c - i0 as f64, live)
}

/// Sample every channel of `image` at `(y, x)` into `out`.
pub fn sample(image: &[f64], channels: usize, height: usize, width: usize, y: f64, x: f64, out: &mut [f64]) {
    let tap = BilinearTap::new(height, width, y, x);
    let corners = tap.corners(width);
    let plane = height * width;
    for (c, o) in out.iter_mut().enumerate().take(channels) {
        let base = c * plane;
        *o = corners.iter().map(|&(i, w)| w * image[base + i]).sum();
    }
}

/// Like [`sample`], also writing `d out / d y` and `d out / d x` per channel.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_grad(
    image: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    y: f64,
    x: f64,
    out: &mut [f64],
    d_dy: &mut [f64],
    d_dx: &mut [f64],
) -> BilinearTap {
    let tap = BilinearTap::new(height, width, y, x);
    let plane = height * width;
    let (i00, i01) = (tap.y0 * width + tap.x0, tap.y0 * width + tap.x1);
    let (i10, i11) = (tap.y1 * width + tap.x0, tap.y1 * width + tap.x1);
    for c in 0..channels {
        let b = c * plane;
        let (v00, v01, v10, v11) = (image[b + i00], image[b + i01], image[b + i10], image[b + i11]);
        let top = v00 + tap.fx * (v01 - v00);
        let bottom = v10 + tap.fx * (v11 - v10);
        out[c] = top + tap.fy * (bottom - top);
        d_dy[c] = tap.dy_live * (bottom - top);
        d_dx[c] = tap.dx_live * ((1.0 - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
    }
    tap
}

/// Channel-last (`H × W × C`) f32 image to planar f64.
pub fn planar_from_hwc(data: &[f32], channels: usize, height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for p in 0..height * width {
        for c in 0..channels {
            out[c * height * width + p] = data[p * channels + c] as f64;
        }
    }
    out
}
