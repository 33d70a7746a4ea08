//! Differentiable ops on [`Var`].

use std::sync::Arc;

use crate::kernels::{conv2d_backward, conv2d_forward, gemm};
use crate::{Tape, Tensor, Var};

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f32) -> f32,
    // derivative given (input, output)
    df: impl Fn(f32, f32) -> f32 + 'static,
) -> Var<'t> {
    let input = x.value();
    let out = input.map(f);
    let saved_out = Arc::new(out.clone());
    x.tape().push(out, &[x], move |g| {
        let data = g
            .data()
            .iter()
            .zip(input.data())
            .zip(saved_out.data())
            .map(|((&g, &i), &o)| g * df(i, o))
            .collect();
        vec![Some(Tensor::new(g.shape(), data))]
    })
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let out = self.with_value(|a| other.with_value(|b| a.zip_map(b, |x, y| x + y)));
        self.tape()
            .push(out, &[self, other], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let out = self.with_value(|a| other.with_value(|b| a.zip_map(b, |x, y| x - y)));
        self.tape()
            .push(out, &[self, other], |g| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape().push(out, &[self, other], move |g| {
            vec![
                Some(g.zip_map(&b, |g, y| g * y)),
                Some(g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn add_scalar(self, value: f32) -> Var<'t> {
        let out = self.with_value(|a| a.map(|x| x + value));
        self.tape().push(out, &[self], |g| vec![Some(g.clone())])
    }

    pub fn scale(self, factor: f32) -> Var<'t> {
        let out = self.with_value(|a| a.scale(factor));
        self.tape()
            .push(out, &[self], move |g| vec![Some(g.scale(factor))])
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'t> {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        unary(self, f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f32::exp, |_, y| y)
    }

    pub fn square(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(self) -> Var<'t> {
        unary(self, f32::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sum(self) -> Var<'t> {
        let shape = self.shape();
        let out = Tensor::scalar(self.with_value(Tensor::sum));
        self.tape().push(out, &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let shape = self.shape();
        let n: usize = shape.iter().product();
        let out = Tensor::scalar(self.with_value(Tensor::mean));
        self.tape().push(out, &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item() / n as f32))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let old = self.shape();
        let out = (*self.value()).clone().reshape(shape);
        self.tape().push(out, &[self], move |g| {
            vec![Some(g.clone().reshape(&old))]
        })
    }

    /// 2-d convolution. `weight: [O, C, kh, kw]`, `bias: [O]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let (out, cols) = conv2d_forward(&x, &w, b.as_deref(), stride, pad);
        let x_shape = x.dims4();
        drop(x);
        let need_dx = self.requires_grad();
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.tape().push(out, &inputs, move |g| {
            let (dx, dw, db) = conv2d_backward(x_shape, &cols, &w, g, stride, pad, need_dx);
            let mut grads = vec![dx, Some(dw)];
            if has_bias {
                grads.push(Some(db));
            }
            grads
        })
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(self) -> Var<'t> {
        let (n, c, h, w) = self.with_value(Tensor::dims4);
        let out = self.with_value(|x| {
            let mut data = vec![0.0; n * c * 4 * h * w];
            for p in 0..n * c {
                let src = &x.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
            Tensor::new(&[n, c, 2 * h, 2 * w], data)
        });
        self.tape().push(out, &[self], move |g| {
            let mut data = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                let dst = &mut data[p * h * w..(p + 1) * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], data))]
        })
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2x2(self) -> Var<'t> {
        let (n, c, h, w) = self.with_value(Tensor::dims4);
        let (ho, wo) = (h / 2, w / 2);
        let out = self.with_value(|x| {
            let mut data = vec![0.0; n * c * ho * wo];
            for p in 0..n * c {
                let src = &x.data()[p * h * w..(p + 1) * h * w];
                for y in 0..ho {
                    for xx in 0..wo {
                        let s = src[2 * y * w + 2 * xx]
                            + src[2 * y * w + 2 * xx + 1]
                            + src[(2 * y + 1) * w + 2 * xx]
                            + src[(2 * y + 1) * w + 2 * xx + 1];
                        data[p * ho * wo + y * wo + xx] = 0.25 * s;
                    }
                }
            }
            Tensor::new(&[n, c, ho, wo], data)
        });
        self.tape().push(out, &[self], move |g| {
            let mut data = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let dst = &mut data[p * h * w..(p + 1) * h * w];
                for y in 0..ho {
                    for xx in 0..wo {
                        let v = 0.25 * g.data()[p * ho * wo + y * wo + xx];
                        dst[2 * y * w + 2 * xx] += v;
                        dst[2 * y * w + 2 * xx + 1] += v;
                        dst[(2 * y + 1) * w + 2 * xx] += v;
                        dst[(2 * y + 1) * w + 2 * xx + 1] += v;
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], data))]
        })
    }

    /// Channel slice `[start, start + len)` of an NCHW tensor.
    pub fn narrow_channels(self, start: usize, len: usize) -> Var<'t> {
        let (n, c, h, w) = self.with_value(Tensor::dims4);
        assert!(start + len <= c, "channel slice out of range");
        let hw = h * w;
        let out = self.with_value(|x| {
            let mut data = Vec::with_capacity(n * len * hw);
            for s in 0..n {
                let base = (s * c + start) * hw;
                data.extend_from_slice(&x.data()[base..base + len * hw]);
            }
            Tensor::new(&[n, len, h, w], data)
        });
        self.tape().push(out, &[self], move |g| {
            let mut data = vec![0.0; n * c * hw];
            for s in 0..n {
                let base = (s * c + start) * hw;
                data[base..base + len * hw]
                    .copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
            }
            vec![Some(Tensor::new(&[n, c, h, w], data))]
        })
    }

    /// Multiply every channel by a single-channel map `[N, 1, H, W]`.
    pub fn mul_map(self, map: Var<'t>) -> Var<'t> {
        let x = self.value();
        let m = map.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(m.shape(), &[n, 1, h, w], "mul_map expects a [N,1,H,W] map");
        let hw = h * w;
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            let ms = &m.data()[s * hw..(s + 1) * hw];
            for ci in 0..c {
                let base = (s * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] = x.data()[base + i] * ms[i];
                }
            }
        }
        self.tape()
            .push(Tensor::new(x.shape(), out), &[self, map], move |g| {
                let mut dx = vec![0.0; x.len()];
                let mut dm = vec![0.0; m.len()];
                for s in 0..n {
                    for ci in 0..c {
                        let base = (s * c + ci) * hw;
                        for i in 0..hw {
                            dx[base + i] = g.data()[base + i] * m.data()[s * hw + i];
                            dm[s * hw + i] += g.data()[base + i] * x.data()[base + i];
                        }
                    }
                }
                vec![
                    Some(Tensor::new(x.shape(), dx)),
                    Some(Tensor::new(m.shape(), dm)),
                ]
            })
    }

    /// Per-channel `x * scale[c] + shift[c]` on NCHW input.
    pub fn channel_affine(self, scale: Var<'t>, shift: Var<'t>) -> Var<'t> {
        let x = self.value();
        let sc = scale.value();
        let sh = shift.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(sc.len(), c);
        assert_eq!(sh.len(), c);
        let hw = h * w;
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * hw;
                let (a, b) = (sc.data()[ci], sh.data()[ci]);
                for i in 0..hw {
                    out[base + i] = x.data()[base + i] * a + b;
                }
            }
        }
        let sc_shape = sc.shape().to_vec();
        let sh_shape = sh.shape().to_vec();
        self.tape()
            .push(Tensor::new(x.shape(), out), &[self, scale, shift], move |g| {
                let mut dx = vec![0.0; x.len()];
                let mut dsc = vec![0.0; c];
                let mut dsh = vec![0.0; c];
                for s in 0..n {
                    for ci in 0..c {
                        let base = (s * c + ci) * hw;
                        let a = sc.data()[ci];
                        let (mut ga, mut gb) = (0.0, 0.0);
                        for i in 0..hw {
                            let gv = g.data()[base + i];
                            dx[base + i] = gv * a;
                            ga += gv * x.data()[base + i];
                            gb += gv;
                        }
                        dsc[ci] += ga;
                        dsh[ci] += gb;
                    }
                }
                vec![
                    Some(Tensor::new(x.shape(), dx)),
                    Some(Tensor::new(&sc_shape, dsc)),
                    Some(Tensor::new(&sh_shape, dsh)),
                ]
            })
    }

    /// Normalize each `(sample, channel)` plane to zero mean, unit variance.
    pub fn instance_norm(self, eps: f32) -> Var<'t> {
        let (n, c, h, w) = self.with_value(Tensor::dims4);
        normalize_groups(self, n * c, 1, h * w, eps).0
    }

    /// Batch-statistics normalization per channel. Also returns the batch
    /// mean and (biased) variance so callers can track running statistics.
    pub fn batch_norm_stats(self, eps: f32) -> (Var<'t>, Vec<f32>, Vec<f32>) {
        let (n, c, h, w) = self.with_value(Tensor::dims4);
        normalize_groups(self, c, n, h * w, eps)
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        self.tape()
            .push(Tensor::new(&[m, n], out), &[self, other], move |g| {
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut da, 0.0);
                gemm(k, m, n, a.data(), true, g.data(), false, &mut db, 0.0);
                vec![
                    Some(Tensor::new(&[m, k], da)),
                    Some(Tensor::new(&[k, n], db)),
                ]
            })
    }

    /// `[N, D] + bias[D]`.
    pub fn add_row_bias(self, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let (n, d) = x.dims2();
        let out = bias.with_value(|b| {
            assert_eq!(b.len(), d);
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Tensor::new(&[n, d], data)
        });
        let bshape = bias.shape();
        self.tape().push(out, &[self, bias], move |g| {
            let mut db = vec![0.0; d];
            for row in g.data().chunks(d) {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::new(&bshape, db))]
        })
    }

    /// Global average over H and W: `[N, C, H, W] -> [N, C]`.
    pub fn mean_spatial(self) -> Var<'t> {
        let (n, c, h, w) = self.with_value(Tensor::dims4);
        let hw = h * w;
        let out = self.with_value(|x| {
            Tensor::new(
                &[n, c],
                x.data().chunks(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect(),
            )
        });
        self.tape().push(out, &[self], move |g| {
            let mut data = Vec::with_capacity(n * c * hw);
            for &v in g.data() {
                data.extend(std::iter::repeat_n(v / hw as f32, hw));
            }
            vec![Some(Tensor::new(&[n, c, h, w], data))]
        })
    }

    /// Softmax across the channel axis of an NCHW tensor.
    pub fn softmax_channels(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for i in 0..hw {
                let mut max = f32::NEG_INFINITY;
                for ci in 0..c {
                    max = max.max(x.data()[(s * c + ci) * hw + i]);
                }
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (x.data()[(s * c + ci) * hw + i] - max).exp();
                    out[(s * c + ci) * hw + i] = e;
                    z += e;
                }
                for ci in 0..c {
                    out[(s * c + ci) * hw + i] /= z;
                }
            }
        }
        let y = Arc::new(Tensor::new(x.shape(), out));
        let saved = y.clone();
        self.tape().push((*y).clone(), &[self], move |g| {
            let mut dx = vec![0.0; saved.len()];
            for s in 0..n {
                for i in 0..hw {
                    let mut dot = 0.0;
                    for ci in 0..c {
                        let idx = (s * c + ci) * hw + i;
                        dot += g.data()[idx] * saved.data()[idx];
                    }
                    for ci in 0..c {
                        let idx = (s * c + ci) * hw + i;
                        dx[idx] = saved.data()[idx] * (g.data()[idx] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(saved.shape(), dx))]
        })
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against a constant label,
    /// computed in the numerically stable logit form.
    pub fn bce_with_logits(self, label: f32) -> Var<'t> {
        let x = self.value();
        let n = x.len() as f32;
        let loss: f32 = x
            .data()
            .iter()
            .map(|&z| z.max(0.0) - z * label + (-z.abs()).exp().ln_1p())
            .sum::<f32>()
            / n;
        self.tape().push(Tensor::scalar(loss), &[self], move |g| {
            let gv = g.item() / n;
            vec![Some(x.map(|z| gv * (sigmoid(z) - label)))]
        })
    }

    /// Mean of `|self - other|`.
    pub fn l1_loss(self, other: Var<'t>) -> Var<'t> {
        self.sub(other).abs().mean()
    }

    /// Mean of `(self - other)^2`.
    pub fn mse_loss(self, other: Var<'t>) -> Var<'t> {
        self.sub(other).square().mean()
    }

    /// Weighted per-region means: `feat: [N, C, H, W]`, `weights: [N, R, H, W]`
    /// (typically one-hot region masks) → `[N, R, C]`, each divided by the
    /// region's total weight. Regions with zero weight yield zeros.
    pub fn region_mean(self, weights: Var<'t>) -> Var<'t> {
        let f = self.value();
        let m = weights.value();
        let (n, c, h, w) = f.dims4();
        let (n2, r, h2, w2) = m.dims4();
        assert_eq!((n, h, w), (n2, h2, w2), "region_mean shape mismatch");
        let hw = h * w;
        let mut out = vec![0.0; n * r * c];
        let mut totals = vec![0.0f32; n * r];
        for s in 0..n {
            for ri in 0..r {
                let mp = &m.data()[(s * r + ri) * hw..(s * r + ri + 1) * hw];
                let total: f32 = mp.iter().sum();
                totals[s * r + ri] = total;
                if total <= 0.0 {
                    continue;
                }
                for ci in 0..c {
                    let fp = &f.data()[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                    let acc: f32 = fp.iter().zip(mp).map(|(a, b)| a * b).sum();
                    out[(s * r + ri) * c + ci] = acc / total;
                }
            }
        }
        self.tape()
            .push(Tensor::new(&[n, r, c], out), &[self, weights], move |g| {
                let mut df = vec![0.0; f.len()];
                for s in 0..n {
                    for ri in 0..r {
                        let total = totals[s * r + ri];
                        if total <= 0.0 {
                            continue;
                        }
                        let mp = &m.data()[(s * r + ri) * hw..(s * r + ri + 1) * hw];
                        for ci in 0..c {
                            let gv = g.data()[(s * r + ri) * c + ci] / total;
                            let dst = &mut df[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                            for (d, &mv) in dst.iter_mut().zip(mp) {
                                *d += gv * mv;
                            }
                        }
                    }
                }
                // Region weights are treated as fixed selectors.
                vec![Some(Tensor::new(f.shape(), df)), None]
            })
    }

    /// Paint per-region codes back onto pixels: `codes: [N, R, C]`,
    /// `weights: [N, R, H, W]` → `[N, C, H, W]` with
    /// `out[c, p] = Σ_r codes[r, c] · weights[r, p]`.
    pub fn region_broadcast(self, weights: Var<'t>) -> Var<'t> {
        let codes = self.value();
        let m = weights.value();
        let (n, r, h, w) = m.dims4();
        assert_eq!(codes.shape()[..2], [n, r], "region_broadcast shape mismatch");
        let c = codes.shape()[2];
        let hw = h * w;
        let mut out = vec![0.0; n * c * hw];
        for s in 0..n {
            // out_s [C, HW] = codes_sᵀ [C, R] @ m_s [R, HW]
            gemm(
                c,
                r,
                hw,
                &codes.data()[s * r * c..(s + 1) * r * c],
                true,
                &m.data()[s * r * hw..(s + 1) * r * hw],
                false,
                &mut out[s * c * hw..(s + 1) * c * hw],
                0.0,
            );
        }
        self.tape()
            .push(Tensor::new(&[n, c, h, w], out), &[self, weights], move |g| {
                let mut dcodes = vec![0.0; codes.len()];
                let mut dm = vec![0.0; m.len()];
                for s in 0..n {
                    let gs = &g.data()[s * c * hw..(s + 1) * c * hw];
                    // dcodes_s [R, C] = m_s [R, HW] @ g_sᵀ [HW, C]
                    gemm(
                        r,
                        hw,
                        c,
                        &m.data()[s * r * hw..(s + 1) * r * hw],
                        false,
                        gs,
                        true,
                        &mut dcodes[s * r * c..(s + 1) * r * c],
                        0.0,
                    );
                    // dm_s [R, HW] = codes_s [R, C] @ g_s [C, HW]
                    gemm(
                        r,
                        c,
                        hw,
                        &codes.data()[s * r * c..(s + 1) * r * c],
                        false,
                        gs,
                        false,
                        &mut dm[s * r * hw..(s + 1) * r * hw],
                        0.0,
                    );
                }
                vec![
                    Some(Tensor::new(codes.shape(), dcodes)),
                    Some(Tensor::new(m.shape(), dm)),
                ]
            })
    }
}

/// Concatenate NCHW tensors along the channel axis.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape: &'t Tape = parts[0].tape();
    let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let (n, _, h, w) = values[0].dims4();
    let channels: Vec<usize> = values
        .iter()
        .map(|v| {
            let (n2, c, h2, w2) = v.dims4();
            assert_eq!((n, h, w), (n2, h2, w2), "concat shape mismatch");
            c
        })
        .collect();
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for s in 0..n {
        for (v, &c) in values.iter().zip(&channels) {
            data.extend_from_slice(&v.data()[s * c * hw..(s + 1) * c * hw]);
        }
    }
    drop(values);
    tape.push(Tensor::new(&[n, total, h, w], data), parts, move |g| {
        let mut offset = 0;
        channels
            .iter()
            .map(|&c| {
                let mut part = Vec::with_capacity(n * c * hw);
                for s in 0..n {
                    let base = (s * total + offset) * hw;
                    part.extend_from_slice(&g.data()[base..base + c * hw]);
                }
                offset += c;
                Some(Tensor::new(&[n, c, h, w], part))
            })
            .collect()
    })
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalize `groups` groups, each made of `reps` strided runs of `run`
/// contiguous values (instance norm: reps = 1; batch norm: reps = N).
fn normalize_groups<'t>(
    x: Var<'t>,
    groups: usize,
    reps: usize,
    run: usize,
    eps: f32,
) -> (Var<'t>, Vec<f32>, Vec<f32>) {
    let input = x.value();
    let count = (reps * run) as f32;
    // Index of the j-th run of group g.
    let offset = move |g: usize, j: usize| (j * groups + g) * run;
    let mut means = vec![0.0f32; groups];
    let mut vars = vec![0.0f32; groups];
    let mut out = vec![0.0f32; input.len()];
    for g in 0..groups {
        let mut sum = 0.0f64;
        for j in 0..reps {
            let o = offset(g, j);
            sum += input.data()[o..o + run].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = (sum / count as f64) as f32;
        let mut sq = 0.0f64;
        for j in 0..reps {
            let o = offset(g, j);
            sq += input.data()[o..o + run]
                .iter()
                .map(|&v| ((v - mean) as f64).powi(2))
                .sum::<f64>();
        }
        let var = (sq / count as f64) as f32;
        means[g] = mean;
        vars[g] = var;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..reps {
            let o = offset(g, j);
            for i in o..o + run {
                out[i] = (input.data()[i] - mean) * inv;
            }
        }
    }
    let normed = Arc::new(Tensor::new(input.shape(), out));
    let saved = normed.clone();
    let inv_std: Vec<f32> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let result = x.tape().push((*normed).clone(), &[x], move |g| {
        // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
        let mut dx = vec![0.0f32; saved.len()];
        for gi in 0..groups {
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for j in 0..reps {
                let o = offset(gi, j);
                for i in o..o + run {
                    sg += g.data()[i] as f64;
                    sgx += (g.data()[i] * saved.data()[i]) as f64;
                }
            }
            let mg = (sg / count as f64) as f32;
            let mgx = (sgx / count as f64) as f32;
            for j in 0..reps {
                let o = offset(gi, j);
                for i in o..o + run {
                    dx[i] = inv_std[gi] * (g.data()[i] - mg - saved.data()[i] * mgx);
                }
            }
        }
        vec![Some(Tensor::new(saved.shape(), dx))]
    });
    (result, means, vars)
}
