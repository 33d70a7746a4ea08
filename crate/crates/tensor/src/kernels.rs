//! Raw loops behind the differentiable ops. Everything here is single
//! threaded and visits memory in a fixed order, so results are bit-stable.

use crate::Tensor;

/// `c = alpha * a @ b + beta * c` for row-major `a: [m, k]`, `b: [k, n]`.
/// `trans_a` / `trans_b` read the operand as stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: slice lengths were checked against the m/k/n extents above and
    // the strides describe exactly those dense row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold sample `x` into rows of `out` laid out `[rows, total_cols]`,
/// writing columns `offset..offset + g.cols()`.
fn im2col(x: &[f32], g: &ConvGeom, out: &mut [f32], total_cols: usize, offset: usize) {
    let cols = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * total_cols + offset..row * total_cols + offset + cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // ix = ox + kx - pad is valid for ox in [lo, hi).
                        let lo = g.pad.saturating_sub(kx).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let start = lo + kx - g.pad;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`].
fn col2im_add(cols_buf: &[f32], g: &ConvGeom, dx: &mut [f32], total_cols: usize, offset: usize) {
    let cols = g.cols();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols_buf[row * total_cols + offset..row * total_cols + offset + cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
                        let start = lo + kx - g.pad;
                        for (d, s) in line[start..start + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for (ox, s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                line[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolded input of a whole batch, `[rows, N * cols]`.
pub(crate) struct Columns {
    data: Vec<f32>,
}

fn unfold_batch(x: &Tensor, g: &ConvGeom) -> Columns {
    let (n, c, h, w) = x.dims4();
    let total = n * g.cols();
    let mut data = vec![0.0f32; g.rows() * total];
    for s in 0..n {
        let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
        if g.is_pointwise() {
            for ci in 0..c {
                data[ci * total + s * g.cols()..ci * total + (s + 1) * g.cols()]
                    .copy_from_slice(&xs[ci * h * w..(ci + 1) * h * w]);
            }
        } else {
            im2col(xs, g, &mut data, total, s * g.cols());
        }
    }
    Columns { data }
}

/// Forward convolution; also returns the unfolded input for reuse in the
/// backward pass.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> (Tensor, Columns) {
    let (n, c, h, w) = x.dims4();
    let (o, wc, kh, kw) = weight.dims4();
    assert_eq!(c, wc, "conv input has {c} channels, weight expects {wc}");
    let g = ConvGeom::new(c, h, w, kh, kw, stride, pad);
    let cols = unfold_batch(x, &g);
    let total = n * g.cols();
    let mut flat = vec![0.0f32; o * total];
    gemm(o, g.rows(), total, weight.data(), false, &cols.data, false, &mut flat, 0.0);
    let mut out = vec![0.0f32; n * o * g.cols()];
    for s in 0..n {
        for oc in 0..o {
            let bv = bias.map_or(0.0, |b| b.data()[oc]);
            let src = &flat[oc * total + s * g.cols()..oc * total + (s + 1) * g.cols()];
            let dst = &mut out[(s * o + oc) * g.cols()..(s * o + oc + 1) * g.cols()];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v + bv;
            }
        }
    }
    (Tensor::new(&[n, o, g.ho, g.wo], out), cols)
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped when not needed.
pub(crate) fn conv2d_backward(
    x_shape: (usize, usize, usize, usize),
    cols: &Columns,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, w) = x_shape;
    let (o, _, kh, kw) = weight.dims4();
    let g = ConvGeom::new(c, h, w, kh, kw, stride, pad);
    let total = n * g.cols();
    // dY as [o, N * cols].
    let mut dy_flat = vec![0.0f32; o * total];
    let mut dbias = vec![0.0f32; o];
    for s in 0..n {
        for oc in 0..o {
            let src = &dy.data()[(s * o + oc) * g.cols()..(s * o + oc + 1) * g.cols()];
            dbias[oc] += src.iter().sum::<f32>();
            dy_flat[oc * total + s * g.cols()..oc * total + (s + 1) * g.cols()].copy_from_slice(src);
        }
    }
    let mut dweight = vec![0.0f32; weight.len()];
    gemm(o, total, g.rows(), &dy_flat, false, &cols.data, true, &mut dweight, 0.0);
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0f32; g.rows() * total];
        gemm(g.rows(), o, total, weight.data(), true, &dy_flat, false, &mut dcols, 0.0);
        let mut dx = vec![0.0f32; n * c * h * w];
        for s in 0..n {
            let dxs = &mut dx[s * c * h * w..(s + 1) * c * h * w];
            if g.is_pointwise() {
                for ci in 0..c {
                    dxs[ci * h * w..(ci + 1) * h * w]
                        .copy_from_slice(&dcols[ci * total + s * g.cols()..ci * total + (s + 1) * g.cols()]);
                }
            } else {
                col2im_add(&dcols, &g, dxs, total, s * g.cols());
            }
        }
        Tensor::new(&[n, c, h, w], dx)
    });
    (dx, Tensor::new(weight.shape(), dweight), Tensor::new(&[o], dbias))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let (o, _, kh, kw) = wt.dims4();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((oc * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((s * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, o, ho, wo], out)
    }

    fn ramp(shape: &[usize], seed: f32) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..len).map(|i| (i as f32 * 0.37 + seed).sin() * 0.5).collect(),
        )
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 4), (1, 2, 5)] {
            let x = ramp(&[2, 3, 7, 6], 0.1);
            let w = ramp(&[4, 3, k, k], 0.7);
            let fast = conv2d_forward(&x, &w, None, stride, pad).0;
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-4, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
