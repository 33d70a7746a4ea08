//! Building blocks shared by the stage networks.

use std::sync::Arc;

use rand::Rng;
use vton_tensor::nn::{Bound, Conv2d, Linear, Mode, ParamStore};
use vton_tensor::optim::Adam;
use vton_tensor::{concat_channels, Tape, Tensor, Var};

const SLOPE: f32 = 0.2;
const NORM_EPS: f32 = 1e-5;

/// `[N, 2, H, W]` holding normalised row and column coordinates in `[0, 1]`.
pub fn coord_channels(n: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut data = vec![0.0; n * 2 * hw];
    let fy = if h > 1 { 1.0 / (h - 1) as f32 } else { 0.0 };
    let fx = if w > 1 { 1.0 / (w - 1) as f32 } else { 0.0 };
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                data[(s * 2) * hw + y * w + x] = y as f32 * fy;
                data[(s * 2 + 1) * hw + y * w + x] = x as f32 * fx;
            }
        }
    }
    Tensor::new(&[n, 2, h, w], data)
}

/// PatchGAN critic: four stride-2 4×4 convolutions (instance norm after the
/// first, leaky ReLU 0.2 throughout) and a 3×3 head producing one logit per
/// patch.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    downs: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    pub const WIDTHS: [usize; 4] = [16, 32, 64, 64];

    pub fn new(store: &mut ParamStore, name: &str, cin: usize, rng: &mut impl Rng) -> Self {
        let mut downs = Vec::new();
        let mut prev = cin;
        for (i, &c) in Self::WIDTHS.iter().enumerate() {
            downs.push(Conv2d::with_options(store, &format!("{name}.down{i}"), prev, c, 4, 2, 1, true, 1.0, rng));
            prev = c;
        }
        let head = Conv2d::with_options(store, &format!("{name}.head"), prev, 1, 3, 1, 1, true, 0.5, rng);
        Self { downs, head }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (i, conv) in self.downs.iter().enumerate() {
            h = conv.forward(p, h);
            if i > 0 {
                h = h.instance_norm(NORM_EPS);
            }
            h = h.leaky_relu(SLOPE);
        }
        self.head.forward(p, h)
    }
}

/// Sigmoid kept strictly inside `(0, 1)` so log-losses stay finite.
pub fn prob_from_logit(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(1e-12, 1.0 - 1e-12)
}

/// A [`PatchDiscriminator`] together with its parameters and optimiser.
pub struct Critic {
    pub net: PatchDiscriminator,
    pub store: ParamStore,
    pub opt: Adam,
}

impl Critic {
    pub fn new(name: &str, cin: usize, lr: f32, betas: (f32, f32), rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let net = PatchDiscriminator::new(&mut store, name, cin, rng);
        let opt = Adam::new(&store, lr, betas);
        Self { net, store, opt }
    }

    /// One discriminator update; returns `bce(D(real), 1) + bce(D(fake), 0)`.
    pub fn update(&mut self, real: &Tensor, fake: &Tensor) -> f64 {
        let tape = Tape::new();
        let p = self.store.bind(&tape, Mode::Train, true, 0);
        let lr = self.net.forward(&p, tape.constant(real.clone())).bce_with_logits(1.0);
        let lf = self.net.forward(&p, tape.constant(fake.clone())).bce_with_logits(0.0);
        let loss = lr.add(lf);
        let grads = tape.backward(loss);
        crate::train_util::apply_step(&mut self.store, &mut self.opt, &p, &grads);
        loss.item() as f64
    }

    /// Non-saturating generator loss `bce(D(fake), 1)`, differentiable with
    /// respect to `fake` only.
    pub fn generator_loss<'t>(&self, tape: &'t Tape, fake: Var<'t>) -> Var<'t> {
        let p = self.store.bind(tape, Mode::Eval, false, 0);
        self.net.forward(&p, fake).bce_with_logits(1.0)
    }

    /// Patch probabilities in `(0, 1)`.
    pub fn probabilities(&self, x: &Tensor) -> Vec<f64> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, Mode::Eval, false, 0);
        let logits = self.net.forward(&p, tape.constant(x.clone())).value();
        logits.data().iter().map(|&z| prob_from_logit(z as f64)).collect()
    }
}

/// Three-level U-Net with skip connections. Input height and width must be
/// divisible by 8.
#[derive(Clone, Debug)]
pub struct UNet {
    stem: Conv2d,
    downs: [Conv2d; 3],
    ups: [Conv2d; 3],
    out: Conv2d,
}

impl UNet {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, base: usize, rng: &mut impl Rng) -> Self {
        let b = base;
        let c = |s: &mut ParamStore, n: &str, i, o, k, st, r: &mut _| Conv2d::new(s, &format!("{name}.{n}"), i, o, k, st, r);
        Self {
            stem: c(store, "stem", cin, b, 3, 1, rng),
            downs: [
                c(store, "down1", b, 2 * b, 3, 2, rng),
                c(store, "down2", 2 * b, 4 * b, 3, 2, rng),
                c(store, "down3", 4 * b, 4 * b, 3, 2, rng),
            ],
            ups: [
                c(store, "up2", 8 * b, 4 * b, 3, 1, rng),
                c(store, "up1", 6 * b, 2 * b, 3, 1, rng),
                c(store, "up0", 3 * b, b, 3, 1, rng),
            ],
            out: Conv2d::with_options(store, &format!("{name}.out"), b, cout, 1, 1, 0, true, 0.5, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let e0 = self.stem.forward(p, x).leaky_relu(SLOPE);
        let mut skips = vec![e0];
        let mut h = e0;
        for conv in &self.downs {
            h = conv.forward(p, h).instance_norm(NORM_EPS).leaky_relu(SLOPE);
            skips.push(h);
        }
        skips.pop();
        for (i, conv) in self.ups.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = concat_channels(&[h.upsample2x(), skip]);
            h = conv.forward(p, h);
            if i < 2 {
                h = h.instance_norm(NORM_EPS);
            }
            h = h.relu();
        }
        self.out.forward(p, h)
    }
}

/// Interpolation taps for resizing a length-`src` axis onto `dst` samples
/// with aligned end points.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 2);
            (lo, lo + 1, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Tape op: bilinear resize of `[N, C, h, w]` to `[N, C, H, W]` with aligned
/// corners. Linear in the input, so the backward pass is the transpose.
pub fn resize_bilinear<'t>(x: Var<'t>, out_h: usize, out_w: usize) -> Var<'t> {
    let v = x.value();
    let (n, c, h, w) = v.dims4();
    let ty = Arc::new(axis_taps(h, out_h));
    let tx = Arc::new(axis_taps(w, out_w));
    let mut out = vec![0.0; n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &v.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    x.tape().push(Tensor::new(&[n, c, out_h, out_w], out), &[x], move |g| {
        let mut dx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            let gp = &g.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = gp[oy * out_w + ox];
                    dp[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    dp[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    dp[y1 * w + x0] += gv * fy * (1.0 - fx);
                    dp[y1 * w + x1] += gv * fy * fx;
                }
            }
        }
        vec![Some(Tensor::new(&[n, c, h, w], dx))]
    })
}

/// Small image classifier: three stride-2 convolutions, global average
/// pooling and a linear head producing `[N, classes]` logits.
#[derive(Clone, Debug)]
pub struct ConvClassifier {
    convs: [Conv2d; 3],
    fc: Linear,
}

impl ConvClassifier {
    pub const WIDTHS: [usize; 3] = [16, 32, 32];

    pub fn new(store: &mut ParamStore, name: &str, cin: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let [a, b, c] = Self::WIDTHS;
        Self {
            convs: [
                Conv2d::new(store, &format!("{name}.conv1"), cin, a, 3, 2, rng),
                Conv2d::new(store, &format!("{name}.conv2"), a, b, 3, 2, rng),
                Conv2d::new(store, &format!("{name}.conv3"), b, c, 3, 2, rng),
            ],
            fc: Linear::new(store, &format!("{name}.fc"), c, classes, 1.0, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(p, h).relu();
        }
        self.fc.forward(p, h.mean_spatial())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use vton_tensor::nn::Mode;
    use vton_tensor::Tape;

    #[test]
    fn shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let d = PatchDiscriminator::new(&mut store, "d", 5, &mut rng);
        let u = UNet::new(&mut store, "u", 5, 2, 4, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, Mode::Eval, false, 0);
        let x = tape.constant(Tensor::full(&[2, 5, 64, 48], 0.3));
        assert_eq!(d.forward(&p, x).shape(), vec![2, 1, 4, 3]);
        assert_eq!(u.forward(&p, x).shape(), vec![2, 2, 64, 48]);
    }

    #[test]
    fn resize_reproduces_linear_ramps_and_adjoint() {
        let tape = Tape::new();
        let src: Vec<f32> = (0..3 * 4).map(|i| ((i / 4) * 10 + i % 4) as f32).collect();
        let x = tape.variable(Tensor::new(&[1, 1, 3, 4], src));
        let y = resize_bilinear(x, 5, 7);
        let v = y.value();
        // A bilinear ramp is reproduced exactly at every output position.
        for oy in 0..5 {
            for ox in 0..7 {
                let expect = (oy as f32 * 2.0 / 4.0) * 10.0 + ox as f32 * 3.0 / 6.0;
                assert!((v.data()[oy * 7 + ox] - expect).abs() < 1e-5);
            }
        }
        // <Ax, g> == <x, Aᵀg> with g = ones.
        let grads = tape.backward(y.sum());
        let total: f32 = grads.get(x).unwrap().data().iter().sum();
        assert!((total - 35.0).abs() < 1e-4);
    }

    #[test]
    fn coords_span_unit_interval() {
        let c = coord_channels(1, 3, 5);
        assert_eq!(c.data()[2 * 5 + 4], 1.0);
        assert_eq!(c.data()[15 + 4], 1.0);
        assert_eq!(c.data()[0], 0.0);
    }
}
