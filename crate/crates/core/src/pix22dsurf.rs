//! Stage 2: contour warping, mask-only UV correspondence prediction, texture
//! transfer through the correspondence and try-on synthesis.
//!
//! Texel `(k, l)` of a `K × L` grid sits at image position
//! `(k (H-1) / (K-1), l (W-1) / (L-1))` of the person image. The predictor
//! assigns each texel a garment-image coordinate; the texture is carried over
//! by interpolating those coordinates to every pixel of the warped footprint
//! and bilinearly sampling the masked garment there.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use vton_tensor::checkpoint::{read_container, write_container, Checkpoint, ContainerError};
use vton_tensor::nn::{Bound, Conv2d, Mode, ParamStore};
use vton_tensor::concat_channels;
use vton_tensor::optim::Adam;
use vton_tensor::{Tape, Tensor, Var};

use crate::dataset::DatasetPair;
use crate::error::{invalid, Result, VtonError};
use crate::image::{BinaryMask, ImageTensor};
use crate::losses;
use crate::nets::{coord_channels, resize_bilinear, Critic, UNet};
use crate::pose::{PoseHeatmap, NUM_KEYPOINTS};
use crate::sampling::{sample, sample_with_grad, BilinearTap};
use crate::segmentation::{label, SegmentationMap, NUM_LABELS};
use crate::synth::GroundTruthWarp;
use crate::train_util::{apply_step, batches, check_finite, gather, shuffled, Curves};

pub const DEFAULT_UV: usize = 32;
/// Warper conditioning: garment mask, pose heatmaps, predicted parsing.
pub const WARPER_INPUTS: usize = 1 + NUM_KEYPOINTS + NUM_LABELS;
/// Synthesizer conditioning: pose, predicted parsing, warped garment, identity.
pub const SYNTH_INPUTS: usize = NUM_KEYPOINTS + NUM_LABELS + 3 + 3;
const SYNTH_OUTPUTS: usize = 5;

/// Image position of texel `(k, l)` on an `h × w` image.
pub fn texel_position(k: usize, l: usize, grid: (usize, usize), h: usize, w: usize) -> (f64, f64) {
    let along = |i: usize, n: usize, len: usize| {
        if n < 2 {
            0.0
        } else {
            i as f64 * (len - 1) as f64 / (n - 1) as f64
        }
    };
    (along(k, grid.0, h), along(l, grid.1, w))
}

/// Dense UV→image correspondence on a `K × L` texel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct UVCorrespondence {
    k: usize,
    l: usize,
    height: usize,
    width: usize,
    /// `(y, x)` garment-image coordinate per texel, row-major.
    coords: Vec<(f64, f64)>,
    valid: Vec<bool>,
    footprint: BinaryMask,
}

#[derive(Serialize, Deserialize)]
struct CorrespondenceHeader {
    kind: String,
    k: usize,
    l: usize,
    height: usize,
    width: usize,
}

const CORR_KIND: &str = "uv_correspondence";

impl UVCorrespondence {
    /// Validity follows the footprint: a texel is valid when it lies inside
    /// the footprint's bounding box grown by one texel spacing.
    pub fn new(k: usize, l: usize, coords: Vec<(f64, f64)>, footprint: BinaryMask) -> Result<Self> {
        if k < 2 || l < 2 {
            return Err(invalid(format!("UV grid must be at least 2x2, got {k}x{l}")));
        }
        if coords.len() != k * l {
            return Err(invalid(format!("{} coordinates for a {k}x{l} grid", coords.len())));
        }
        let (h, w) = (footprint.height(), footprint.width());
        let valid = match footprint.bounding_box() {
            None => vec![false; k * l],
            Some((y0, y1, x0, x1)) => {
                let sy = (h - 1) as f64 / (k - 1) as f64;
                let sx = (w - 1) as f64 / (l - 1) as f64;
                (0..k * l)
                    .map(|i| {
                        let (py, px) = texel_position(i / l, i % l, (k, l), h, w);
                        py >= y0 as f64 - sy && py <= y1 as f64 + sy && px >= x0 as f64 - sx && px <= x1 as f64 + sx
                    })
                    .collect()
            }
        };
        let mut corr = Self {
            k,
            l,
            height: h,
            width: w,
            coords,
            valid,
            footprint,
        };
        for (c, &v) in corr.coords.iter_mut().zip(&corr.valid) {
            if v {
                c.0 = c.0.clamp(0.0, (h - 1) as f64);
                c.1 = c.1.clamp(0.0, (w - 1) as f64);
            }
        }
        Ok(corr)
    }

    /// Every texel maps to the image point it sits on.
    pub fn identity(k: usize, l: usize, footprint: BinaryMask) -> Result<Self> {
        let (h, w) = (footprint.height(), footprint.width());
        let coords = (0..k * l).map(|i| texel_position(i / l, i % l, (k, l), h, w)).collect();
        Self::new(k, l, coords, footprint)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.k, self.l)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn footprint(&self) -> &BinaryMask {
        &self.footprint
    }

    pub fn is_degenerate(&self) -> bool {
        !self.valid.iter().any(|&v| v)
    }

    /// Container with a JSON header; coordinates are stored as f32 hi/lo
    /// pairs so they round-trip exactly.
    pub fn write(&self, out: impl Write) -> Result<()> {
        let header = serde_json::to_value(CorrespondenceHeader {
            kind: CORR_KIND.into(),
            k: self.k,
            l: self.l,
            height: self.height,
            width: self.width,
        })?;
        let mut payload = Vec::with_capacity(self.coords.len() * 5 + self.height * self.width);
        for &(y, x) in &self.coords {
            for v in [y, x] {
                let hi = v as f32;
                payload.push(hi);
                payload.push((v - hi as f64) as f32);
            }
        }
        payload.extend(self.valid.iter().map(|&v| v as u8 as f32));
        payload.extend(self.footprint.data().iter().map(|&v| v as f32));
        write_container(out, &header, &payload)?;
        Ok(())
    }

    pub fn read(input: impl Read) -> Result<Self> {
        let (header, payload) = read_container(input)?;
        let h: CorrespondenceHeader = serde_json::from_value(header)?;
        if h.kind != CORR_KIND {
            return Err(invalid(format!("expected a {CORR_KIND} container, found {}", h.kind)));
        }
        let texels = h.k * h.l;
        let expected = texels * 5 + h.height * h.width;
        if payload.len() != expected {
            return Err(ContainerError::Truncated {
                expected,
                found: payload.len(),
            }
            .into());
        }
        let coords = payload[..texels * 4]
            .chunks_exact(4)
            .map(|c| (c[0] as f64 + c[1] as f64, c[2] as f64 + c[3] as f64))
            .collect();
        let valid = payload[texels * 4..texels * 5].iter().map(|&v| v != 0.0).collect();
        let mask = payload[texels * 5..].iter().map(|&v| (v != 0.0) as u8).collect();
        Ok(Self {
            k: h.k,
            l: h.l,
            height: h.height,
            width: h.width,
            coords,
            valid,
            footprint: BinaryMask::new(h.height, h.width, mask)?,
        })
    }
}

/// Aligned-corner interpolation taps from a `n`-sample axis onto `len` pixels.
fn interp_taps(n: usize, len: usize) -> Vec<(usize, usize, f64)> {
    (0..len)
        .map(|i| {
            if len < 2 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (n - 1) as f64 / (len - 1) as f64;
            let lo = (pos.floor() as usize).min(n - 2);
            (lo, lo + 1, pos - lo as f64)
        })
        .collect()
}

/// Per-pixel coordinate field `[(y, x); h * w]` from texel coordinates.
pub fn texel_field_to_pixels(coords: &[(f64, f64)], grid: (usize, usize), h: usize, w: usize) -> Vec<(f64, f64)> {
    let (k, l) = grid;
    let ty = interp_taps(k, h);
    let tx = interp_taps(l, w);
    let mut out = Vec::with_capacity(h * w);
    for &(a, b, fy) in &ty {
        for &(c, d, fx) in &tx {
            let at = |r: usize, s: usize| coords[r * l + s];
            let lerp = |p: (f64, f64), q: (f64, f64), t: f64| (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1));
            out.push(lerp(lerp(at(a, c), at(a, d), fx), lerp(at(b, c), at(b, d), fx), fy));
        }
    }
    out
}

/// Planar `[C, H, W]` sample of `garment` (already masked) at the
/// interpolated field, zero outside `footprint`.
pub fn sample_texture_raw(
    coords: &[(f64, f64)],
    grid: (usize, usize),
    garment: &[f64],
    channels: usize,
    garment_size: (usize, usize),
    footprint: &BinaryMask,
) -> Vec<f64> {
    let (h, w) = (footprint.height(), footprint.width());
    let (gh, gw) = garment_size;
    let field = texel_field_to_pixels(coords, grid, h, w);
    let mut out = vec![0.0; channels * h * w];
    let mut px = vec![0.0; channels];
    for (i, &(y, x)) in field.iter().enumerate() {
        if footprint.data()[i] == 0 {
            continue;
        }
        sample(garment, channels, gh, gw, y, x, &mut px);
        for c in 0..channels {
            out[c * h * w + i] = px[c];
        }
    }
    out
}

/// Gradient of `Σ upstream · sample_texture_raw(...)` with respect to every
/// texel coordinate.
pub fn sample_texture_coord_grad(
    coords: &[(f64, f64)],
    grid: (usize, usize),
    garment: &[f64],
    channels: usize,
    garment_size: (usize, usize),
    footprint: &BinaryMask,
    upstream: &[f64],
) -> Vec<(f64, f64)> {
    let (k, l) = grid;
    let (h, w) = (footprint.height(), footprint.width());
    let (gh, gw) = garment_size;
    let field = texel_field_to_pixels(coords, grid, h, w);
    let ty = interp_taps(k, h);
    let tx = interp_taps(l, w);
    let mut grad = vec![(0.0, 0.0); k * l];
    let (mut px, mut dy, mut dx) = (vec![0.0; channels], vec![0.0; channels], vec![0.0; channels]);
    for (i, &(y, x)) in field.iter().enumerate() {
        if footprint.data()[i] == 0 {
            continue;
        }
        sample_with_grad(garment, channels, gh, gw, y, x, &mut px, &mut dy, &mut dx);
        let (mut gy, mut gx) = (0.0, 0.0);
        for c in 0..channels {
            gy += upstream[c * h * w + i] * dy[c];
            gx += upstream[c * h * w + i] * dx[c];
        }
        let (a, b, fy) = ty[i / w];
        let (c, d, fx) = tx[i % w];
        for (r, wr) in [(a, 1.0 - fy), (b, fy)] {
            for (s, ws) in [(c, 1.0 - fx), (d, fx)] {
                let t = &mut grad[r * l + s];
                t.0 += wr * ws * gy;
                t.1 += wr * ws * gx;
            }
        }
    }
    grad
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    /// No valid texel: the output is all zeros.
    Degenerate,
}

fn masked_planar(garment: &ImageTensor, mask: &BinaryMask) -> Vec<f64> {
    let (h, w, c) = (garment.height(), garment.width(), garment.channels());
    let mut out = vec![0.0; c * h * w];
    for i in 0..h * w {
        if mask.data()[i] != 0 {
            for ch in 0..c {
                out[ch * h * w + i] = garment.data()[i * c + ch] as f64;
            }
        }
    }
    out
}

fn check_texture_inputs(
    corr: &UVCorrespondence,
    garment: &ImageTensor,
    garment_mask: &BinaryMask,
    target_shape: (usize, usize),
) -> Result<()> {
    if !garment.same_size(garment_mask.height(), garment_mask.width()) {
        return Err(invalid("garment and garment mask sizes differ"));
    }
    if corr.image_size() != target_shape {
        return Err(invalid(format!(
            "correspondence footprint is {:?}, target shape {target_shape:?}",
            corr.image_size()
        )));
    }
    Ok(())
}

/// Warped garment `T_c^w`: the masked garment carried onto the footprint.
pub fn sample_texture(
    corr: &UVCorrespondence,
    garment: &ImageTensor,
    garment_mask: &BinaryMask,
    target_shape: (usize, usize),
) -> Result<(ImageTensor, SampleStatus)> {
    check_texture_inputs(corr, garment, garment_mask, target_shape)?;
    let (h, w) = target_shape;
    let c = garment.channels();
    if corr.is_degenerate() {
        return Ok((ImageTensor::filled(h, w, c, 0.0), SampleStatus::Degenerate));
    }
    let planar = sample_texture_raw(
        &corr.coords,
        corr.grid(),
        &masked_planar(garment, garment_mask),
        c,
        (garment.height(), garment.width()),
        &corr.footprint,
    );
    let mut data = vec![0.0; h * w * c];
    for i in 0..h * w {
        for ch in 0..c {
            data[i * c + ch] = planar[ch * h * w + i] as f32;
        }
    }
    Ok((ImageTensor::new(h, w, c, data)?, SampleStatus::Ok))
}

/// Gradient of `Σ upstream ⊙ sample_texture(...)` with respect to each
/// texel's `(y, x)` coordinate.
pub fn sample_texture_grad(
    corr: &UVCorrespondence,
    garment: &ImageTensor,
    garment_mask: &BinaryMask,
    upstream: &ImageTensor,
) -> Result<Vec<(f64, f64)>> {
    let (h, w) = corr.image_size();
    check_texture_inputs(corr, garment, garment_mask, (h, w))?;
    let c = garment.channels();
    if !upstream.same_size(h, w) || upstream.channels() != c {
        return Err(invalid("upstream gradient must match the sampled image"));
    }
    let mut up = vec![0.0; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            up[ch * h * w + i] = upstream.data()[i * c + ch] as f64;
        }
    }
    Ok(sample_texture_coord_grad(
        &corr.coords,
        corr.grid(),
        &masked_planar(garment, garment_mask),
        c,
        (garment.height(), garment.width()),
        &corr.footprint,
        &up,
    ))
}

/// Tape op: sample `images [N, C, Hg, Wg]` at the coordinate field
/// `[N, 2, h, w]` (channel 0 = y, 1 = x). Pixels where `footprint`
/// `[N, 1, h, w]` is zero output 0. Differentiable in the field only.
pub fn grid_sample<'t>(field: Var<'t>, images: Arc<Tensor>, footprint: Option<Arc<Tensor>>) -> Var<'t> {
    let f = field.value();
    let (n, two, h, w) = f.dims4();
    let (ni, c, gh, gw) = images.dims4();
    assert_eq!(two, 2, "grid_sample expects a 2-channel field");
    assert_eq!(n, ni, "grid_sample batch mismatch");
    if let Some(m) = &footprint {
        assert_eq!(m.shape(), &[n, 1, h, w], "grid_sample footprint shape");
    }
    let (hw, ghw) = (h * w, gh * gw);
    let live = move |s: usize, i: usize, fp: &Option<Arc<Tensor>>| fp.as_ref().is_none_or(|m| m.data()[s * hw + i] != 0.0);
    let mut out = vec![0.0; n * c * hw];
    for s in 0..n {
        for i in 0..hw {
            if !live(s, i, &footprint) {
                continue;
            }
            let y = f.data()[s * 2 * hw + i] as f64;
            let x = f.data()[(s * 2 + 1) * hw + i] as f64;
            let corners = BilinearTap::new(gh, gw, y, x).corners(gw);
            for ch in 0..c {
                let img = &images.data()[(s * c + ch) * ghw..];
                let v: f64 = corners.iter().map(|&(o, wt)| img[o] as f64 * wt).sum();
                out[(s * c + ch) * hw + i] = v as f32;
            }
        }
    }
    field.tape().push(Tensor::new(&[n, c, h, w], out), &[field], move |g| {
        let mut df = vec![0.0; n * 2 * hw];
        for s in 0..n {
            for i in 0..hw {
                if !live(s, i, &footprint) {
                    continue;
                }
                let y = f.data()[s * 2 * hw + i] as f64;
                let x = f.data()[(s * 2 + 1) * hw + i] as f64;
                let t = BilinearTap::new(gh, gw, y, x);
                let (mut gy, mut gx) = (0.0, 0.0);
                for ch in 0..c {
                    let img = &images.data()[(s * c + ch) * ghw..];
                    let v00 = img[t.y0 * gw + t.x0] as f64;
                    let v01 = img[t.y0 * gw + t.x1] as f64;
                    let v10 = img[t.y1 * gw + t.x0] as f64;
                    let v11 = img[t.y1 * gw + t.x1] as f64;
                    let up = g.data()[(s * c + ch) * hw + i] as f64;
                    gy += up * t.dy_live * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                    gx += up * t.dx_live * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                }
                df[s * 2 * hw + i] = gy as f32;
                df[(s * 2 + 1) * hw + i] = gx as f32;
            }
        }
        vec![Some(Tensor::new(&[n, 2, h, w], df))]
    })
}

/// Weights of the stage-2 objective `λ1·l_adv + λ2·l_1 + λ3·l_recon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Weights {
    pub lambda_adv: f64,
    pub lambda_l1: f64,
    pub lambda_recon: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_l1: 1.0,
            lambda_recon: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Losses {
    pub total: f64,
    pub adv: f64,
    pub l1: f64,
    pub recon: f64,
}

/// Texel samples for the reconstruction term: `[N, C, T]` predicted and
/// target values plus `[N, T]` validity.
#[derive(Clone, Copy, Debug)]
pub struct TexelBatch<'a> {
    pub pred: &'a [f64],
    pub target: &'a [f64],
    pub valid: &'a [bool],
    pub samples: usize,
    pub channels: usize,
}

/// Stage-2 objective from its parts. `l_adv` is the two-term contour GAN
/// loss on critic probabilities, `l_1` the mean absolute difference between
/// the projected real garment `I_x` and `T_c^w`.
pub fn stage2_losses(
    d_real: &[f64],
    d_fake: &[f64],
    projected_real: &[f64],
    warped_garment: &[f64],
    texels: TexelBatch<'_>,
    weights: Stage2Weights,
) -> Result<Stage2Losses> {
    let (_, adv) = losses::gan_loss(d_real, d_fake)?;
    let l1 = losses::l1_mean(projected_real, warped_garment)?;
    let recon = losses::recon_loss(texels.pred, texels.target, texels.valid, texels.samples, texels.channels)?;
    Ok(Stage2Losses {
        total: weights.lambda_adv * adv + weights.lambda_l1 * l1 + weights.lambda_recon * recon,
        adv,
        l1,
        recon,
    })
}

/// Sizes of the three stage-2 networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Arch {
    pub warper_base: usize,
    pub synth_base: usize,
    pub predictor_width: usize,
    pub res_blocks: usize,
    pub uv_k: usize,
    pub uv_l: usize,
    /// Fixed multipliers on the warper and predictor output logits. They
    /// raise the effective step size of the output layers so short
    /// schedules still move the outputs far from their initial values.
    pub warper_gain: f32,
    pub predictor_gain: f32,
}

impl Default for Stage2Arch {
    fn default() -> Self {
        Self {
            warper_base: 8,
            synth_base: 16,
            predictor_width: 32,
            res_blocks: 6,
            uv_k: DEFAULT_UV,
            uv_l: DEFAULT_UV,
            warper_gain: 4.0,
            predictor_gain: 4.0,
        }
    }
}

fn check_size(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(invalid(format!("{what} is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1)));
    }
    Ok(())
}

/// Contour GAN generator: `(T_m, M_p, M_p^t) → T_m^w`.
#[derive(Clone, Debug)]
pub struct ContourWarper {
    net: UNet,
    gain: f32,
    store: ParamStore,
}

impl ContourWarper {
    pub fn new(base: usize, gain: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, "warper", WARPER_INPUTS, 1, base, &mut rng);
        Self { net, gain, store }
    }

    /// Logits `[N, 1, H, W]`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, track: bool) -> (Var<'t>, Bound<'t>) {
        let p = self.store.bind(tape, Mode::Train, track, 0);
        (self.net.forward(&p, x).scale(self.gain), p)
    }

    /// Soft masks `[N, 1, H, W]` in `[0, 1]`.
    pub fn soft_masks(&self, input: &Tensor) -> Tensor {
        let tape = Tape::new();
        let p = self.store.bind(&tape, Mode::Eval, false, 0);
        (*self.net.forward(&p, tape.constant(input.clone())).scale(self.gain).sigmoid().value()).clone()
    }
}

/// `[1, WARPER_INPUTS, H, W]` warper conditioning.
pub fn warper_input(garment_mask: &BinaryMask, pose: &PoseHeatmap, parsing: &SegmentationMap) -> Result<Tensor> {
    let (h, w) = (garment_mask.height(), garment_mask.width());
    check_size("pose", (pose.height(), pose.width()), (h, w))?;
    check_size("parsing", (parsing.height(), parsing.width()), (h, w))?;
    if pose.num_keypoints() != NUM_KEYPOINTS || parsing.vocabulary().len() != NUM_LABELS {
        return Err(invalid("stage 2 expects the standard label and keypoint sets"));
    }
    let tape = Tape::new();
    let x = concat_channels(&[
        tape.constant(garment_mask.to_tensor()),
        tape.constant(pose.to_tensor()),
        tape.constant(parsing.to_one_hot()),
    ]);
    Ok((*x.value()).clone())
}

/// Warped garment silhouette `T_m^w`, thresholded at 0.5.
pub fn warp_contour(
    warper: &ContourWarper,
    garment_mask: &BinaryMask,
    pose: &PoseHeatmap,
    parsing: &SegmentationMap,
) -> Result<BinaryMask> {
    let soft = warper.soft_masks(&warper_input(garment_mask, pose, parsing)?);
    Ok(BinaryMask::from_soft(garment_mask.height(), garment_mask.width(), soft.data()))
}

/// Residual network from a warped mask (plus coordinate channels) to texel
/// coordinates. Texture never enters this network.
#[derive(Clone, Debug)]
pub struct CorrespondencePredictor {
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<(Conv2d, Conv2d)>,
    up: Conv2d,
    head: Conv2d,
    grid: (usize, usize),
    gain: f32,
    store: ParamStore,
}

impl CorrespondencePredictor {
    pub fn new(arch: &Stage2Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let w = arch.predictor_width;
        let half = (w / 2).max(1);
        let stem = Conv2d::new(&mut s, "predictor.stem", 3, half, 3, 1, &mut rng);
        let down = [
            Conv2d::new(&mut s, "predictor.down1", half, w, 3, 2, &mut rng),
            Conv2d::new(&mut s, "predictor.down2", w, w, 3, 2, &mut rng),
        ];
        let blocks = (0..arch.res_blocks)
            .map(|i| {
                (
                    Conv2d::new(&mut s, &format!("predictor.res{i}.a"), w, w, 3, 1, &mut rng),
                    Conv2d::with_options(&mut s, &format!("predictor.res{i}.b"), w, w, 3, 1, 1, true, 0.5, &mut rng),
                )
            })
            .collect();
        let up = Conv2d::new(&mut s, "predictor.up", w, w, 3, 1, &mut rng);
        let head = Conv2d::with_options(&mut s, "predictor.head", w, 2, 3, 1, 1, true, 0.1, &mut rng);
        Self {
            stem,
            down,
            blocks,
            up,
            head,
            grid: (arch.uv_k, arch.uv_l),
            gain: arch.predictor_gain,
            store: s,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Texel coordinates `[N, 2, K, L]` in pixel units of an `H × W` image,
    /// from masks `[N, 1, H, W]` (`H`, `W` divisible by 4).
    pub fn forward<'t>(&self, p: &Bound<'t>, masks: Var<'t>) -> Var<'t> {
        let tape = masks.tape();
        let (n, _, h, w) = masks.value().dims4();
        let x = concat_channels(&[masks, tape.constant(coord_channels(n, h, w))]);
        let mut x = self.stem.forward(p, x).relu();
        for conv in &self.down {
            x = conv.forward(p, x).relu();
        }
        for (a, b) in &self.blocks {
            x = x.add(b.forward(p, a.forward(p, x).relu()));
        }
        let x = self.up.forward(p, x.relu().upsample2x()).relu();
        let raw = resize_bilinear(self.head.forward(p, x).scale(self.gain), self.grid.0, self.grid.1);
        raw.sigmoid().channel_affine(
            tape.constant(Tensor::new(&[2], vec![(h - 1) as f32, (w - 1) as f32])),
            tape.constant(Tensor::zeros(&[2])),
        )
    }

    pub fn coords(&self, masks: &Tensor) -> Tensor {
        let tape = Tape::new();
        let p = self.store.bind(&tape, Mode::Eval, false, 0);
        (*self.forward(&p, tape.constant(masks.clone())).value()).clone()
    }
}

fn texel_pairs(coords: &Tensor, index: usize) -> Vec<(f64, f64)> {
    let (_, _, k, l) = coords.dims4();
    let t = k * l;
    let d = &coords.data()[index * 2 * t..(index + 1) * 2 * t];
    (0..t).map(|i| (d[i] as f64, d[t + i] as f64)).collect()
}

/// UV correspondence predicted from the warped silhouette alone. An empty
/// mask yields an all-invalid correspondence.
pub fn predict_correspondence(pred: &CorrespondencePredictor, warped_mask: &BinaryMask) -> Result<UVCorrespondence> {
    let (h, w) = (warped_mask.height(), warped_mask.width());
    if h % 4 != 0 || w % 4 != 0 {
        return Err(invalid(format!("predictor needs sides divisible by 4, got {h}x{w}")));
    }
    let coords = pred.coords(&warped_mask.to_tensor());
    UVCorrespondence::new(pred.grid.0, pred.grid.1, texel_pairs(&coords, 0), warped_mask.clone())
}

/// Try-on generator: `(M_p, M_p^t, T_c^w, I_r) → I_t`. The output blends a
/// generated image, the warped garment and the identity image with learned
/// per-pixel weights, so it stays in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct TryonSynthesizer {
    net: UNet,
    store: ParamStore,
}

impl TryonSynthesizer {
    pub fn new(base: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, "synth", SYNTH_INPUTS, SYNTH_OUTPUTS, base, &mut rng);
        Self { net, store }
    }

    /// `cond` is `[N, SYNTH_INPUTS, H, W]` laid out as pose, parsing,
    /// warped garment, identity image.
    pub fn forward<'t>(&self, p: &Bound<'t>, cond: Var<'t>) -> Var<'t> {
        let base = NUM_KEYPOINTS + NUM_LABELS;
        let warped = cond.narrow_channels(base, 3);
        let identity = cond.narrow_channels(base + 3, 3);
        let o = self.net.forward(p, cond);
        let generated = o.narrow_channels(0, 3).sigmoid();
        let alpha = o.narrow_channels(3, 1).sigmoid();
        let beta = o.narrow_channels(4, 1).sigmoid();
        let garment_mix = generated.add(warped.sub(generated).mul_map(alpha));
        garment_mix.add(identity.sub(garment_mix).mul_map(beta))
    }

    pub fn images(&self, cond: &Tensor) -> Tensor {
        let tape = Tape::new();
        let p = self.store.bind(&tape, Mode::Eval, false, 0);
        (*self.forward(&p, tape.constant(cond.clone())).value()).clone()
    }
}

/// `[1, SYNTH_INPUTS, H, W]` synthesizer conditioning.
pub fn synth_input(
    pose: &PoseHeatmap,
    parsing: &SegmentationMap,
    warped_garment: &ImageTensor,
    identity_image: &ImageTensor,
) -> Result<Tensor> {
    let (h, w) = (parsing.height(), parsing.width());
    check_size("pose", (pose.height(), pose.width()), (h, w))?;
    check_size("warped garment", (warped_garment.height(), warped_garment.width()), (h, w))?;
    check_size("identity image", (identity_image.height(), identity_image.width()), (h, w))?;
    if warped_garment.channels() != 3 || identity_image.channels() != 3 {
        return Err(invalid("synthesizer images must be RGB"));
    }
    if pose.num_keypoints() != NUM_KEYPOINTS || parsing.vocabulary().len() != NUM_LABELS {
        return Err(invalid("stage 2 expects the standard label and keypoint sets"));
    }
    let tape = Tape::new();
    let x = concat_channels(&[
        tape.constant(pose.to_tensor()),
        tape.constant(parsing.to_one_hot()),
        tape.constant(warped_garment.to_tensor()),
        tape.constant(identity_image.to_tensor()),
    ]);
    Ok((*x.value()).clone())
}

/// Final try-on image `I_t`.
pub fn synthesize_tryon(
    synth: &TryonSynthesizer,
    pose: &PoseHeatmap,
    parsing: &SegmentationMap,
    warped_garment: &ImageTensor,
    identity_image: &ImageTensor,
) -> Result<ImageTensor> {
    if parsing.height() % 8 != 0 || parsing.width() % 8 != 0 {
        return Err(invalid("synthesizer needs sides divisible by 8"));
    }
    let cond = synth_input(pose, parsing, warped_garment, identity_image)?;
    ImageTensor::from_tensor(&synth.images(&cond), 0)
}

/// The three trained stage-2 networks.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub arch: Stage2Arch,
    pub warper: ContourWarper,
    pub predictor: CorrespondencePredictor,
    pub synthesizer: TryonSynthesizer,
}

/// Intermediate and final stage-2 outputs for one person.
#[derive(Clone, Debug)]
pub struct Stage2Result {
    pub warped_mask: BinaryMask,
    pub correspondence: UVCorrespondence,
    pub warped_garment: ImageTensor,
    pub status: SampleStatus,
    pub tryon: ImageTensor,
}

impl Stage2Model {
    pub fn new(arch: Stage2Arch, seed: u64) -> Self {
        Self {
            warper: ContourWarper::new(arch.warper_base, arch.warper_gain, seed),
            predictor: CorrespondencePredictor::new(&arch, seed.wrapping_add(1)),
            synthesizer: TryonSynthesizer::new(arch.synth_base, seed.wrapping_add(2)),
            arch,
        }
    }

    pub fn checkpoint(&self, step: usize, height: usize, width: usize) -> Checkpoint {
        let meta = json!({
            "stage": 2,
            "arch": self.arch,
            "step": step,
            "height": height,
            "width": width,
        });
        Checkpoint::from_stores(
            meta,
            &[
                ("warper", &self.warper.store),
                ("predictor", &self.predictor.store),
                ("synthesizer", &self.synthesizer.store),
            ],
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("stage").and_then(|v| v.as_u64()) != Some(2) {
            return Err(VtonError::FailedPrecondition("checkpoint is not a stage-2 checkpoint".into()));
        }
        let arch: Stage2Arch = serde_json::from_value(ckpt.meta["arch"].clone())?;
        let mut m = Self::new(arch, 0);
        ckpt.restore("warper", &mut m.warper.store)?;
        ckpt.restore("predictor", &mut m.predictor.store)?;
        ckpt.restore("synthesizer", &mut m.synthesizer.store)?;
        Ok(m)
    }

    /// Run warp → correspondence → texture transfer → synthesis.
    pub fn run(
        &self,
        garment: &ImageTensor,
        garment_mask: &BinaryMask,
        pose: &PoseHeatmap,
        parsing: &SegmentationMap,
        identity_image: &ImageTensor,
    ) -> Result<Stage2Result> {
        let warped_mask = warp_contour(&self.warper, garment_mask, pose, parsing)?;
        let correspondence = predict_correspondence(&self.predictor, &warped_mask)?;
        let shape = (warped_mask.height(), warped_mask.width());
        let (warped_garment, status) = sample_texture(&correspondence, garment, garment_mask, shape)?;
        let tryon = synthesize_tryon(&self.synthesizer, pose, parsing, &warped_garment, identity_image)?;
        Ok(Stage2Result {
            warped_mask,
            correspondence,
            warped_garment,
            status,
            tryon,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub contour_epochs: usize,
    pub texture_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub betas: (f32, f32),
    pub weights: Stage2Weights,
    /// Weight of the mask L1 term next to the contour adversarial loss.
    pub lambda_mask_l1: f32,
    /// Weight of the image L1 term next to the synthesizer adversarial loss.
    pub lambda_image_l1: f32,
    pub seed: u64,
    pub arch: Stage2Arch,
}

/// Channels of the texel target: the normalised garment coordinate when a
/// ground-truth warp is known, otherwise the RGB texture at the texel.
pub const TEXEL_CHART: usize = 2;
pub const TEXEL_RGB: usize = 3;

/// One stage-2 training example, with the predicted parsing from stage 1.
#[derive(Clone, Debug)]
pub struct Stage2Sample {
    pub warper_input: Tensor,
    pub torso_mask: Tensor,
    pub garment_masked: Tensor,
    /// Pose and predicted parsing, `[1, 16, H, W]`.
    pub pose_parsing: Tensor,
    pub identity: Tensor,
    pub projected_real: Tensor,
    pub tryon_gt: Tensor,
    /// `[C, K * L]` target texture map.
    pub texel_target: Vec<f64>,
    /// Texels on the ground-truth garment region.
    pub texel_on_garment: Vec<bool>,
}

impl Stage2Sample {
    pub fn new(
        pair: &DatasetPair,
        predicted_parsing: &SegmentationMap,
        identity_image: &ImageTensor,
        warp: Option<&GroundTruthWarp>,
        grid: (usize, usize),
    ) -> Result<Self> {
        let (h, w) = (pair.height(), pair.width());
        if !pair.shapes_agree() {
            return Err(invalid("dataset pair images disagree in size"));
        }
        let torso = pair.parsing_gt.mask_of(label::TORSO_GARMENT);
        let person_planar = crate::sampling::planar_from_hwc(pair.tryon_gt.data(), 3, h, w);
        let (k, l) = grid;
        let t = k * l;
        let channels = if warp.is_some() { TEXEL_CHART } else { TEXEL_RGB };
        let mut target = vec![0.0; channels * t];
        let mut on = vec![false; t];
        let mut px = [0.0; 3];
        for i in 0..t {
            let (py, pxl) = texel_position(i / l, i % l, grid, h, w);
            on[i] = torso.get(py.round() as usize, pxl.round() as usize);
            match warp {
                Some(wp) => {
                    let (gy, gx) = wp.source(py, pxl);
                    target[i] = gy / (h - 1) as f64;
                    target[t + i] = gx / (w - 1) as f64;
                }
                None => {
                    sample(&person_planar, 3, h, w, py, pxl, &mut px);
                    for c in 0..3 {
                        target[c * t + i] = px[c];
                    }
                }
            }
        }
        let tape = Tape::new();
        let torso_t = torso.to_tensor();
        let projected = tape
            .constant(pair.tryon_gt.to_tensor())
            .mul_map(tape.constant(torso_t.clone()));
        let garment_masked = tape
            .constant(pair.garment.to_tensor())
            .mul_map(tape.constant(pair.garment_mask.to_tensor()));
        let pose_parsing = concat_channels(&[
            tape.constant(pair.pose.to_tensor()),
            tape.constant(predicted_parsing.to_one_hot()),
        ]);
        Ok(Self {
            warper_input: warper_input(&pair.garment_mask, &pair.pose, predicted_parsing)?,
            torso_mask: torso_t,
            garment_masked: (*garment_masked.value()).clone(),
            pose_parsing: (*pose_parsing.value()).clone(),
            identity: identity_image.to_tensor(),
            projected_real: (*projected.value()).clone(),
            tryon_gt: pair.tryon_gt.to_tensor(),
            texel_target: target,
            texel_on_garment: on,
        })
    }

    pub fn texel_channels(&self) -> usize {
        self.texel_target.len() / self.texel_on_garment.len()
    }
}

pub struct Stage2Outcome {
    pub model: Stage2Model,
    pub curves: Curves,
    pub steps: usize,
    /// Reconstruction loss over the training set before and after the
    /// texture-mapping phase.
    pub recon_initial: f64,
    pub recon_final: f64,
}

/// Predicted texel values `[N, C, K*L]`: normalised coordinates for
/// `TEXEL_CHART` targets, garment colour at the predicted coordinates for
/// `TEXEL_RGB` targets.
fn texel_prediction<'t>(coords: Var<'t>, garments: Arc<Tensor>, channels: usize) -> Var<'t> {
    let tape = coords.tape();
    let (n, _, k, l) = coords.value().dims4();
    let (_, _, gh, gw) = garments.dims4();
    let v = if channels == TEXEL_CHART {
        coords.channel_affine(
            tape.constant(Tensor::new(&[2], vec![1.0 / (gh - 1) as f32, 1.0 / (gw - 1) as f32])),
            tape.constant(Tensor::zeros(&[2])),
        )
    } else {
        grid_sample(coords, garments, None)
    };
    v.reshape(&[n, channels, k * l])
}

/// Footprint tensor `[N, 1, H, W]` from soft masks, and per-sample loss
/// validity for the texels.
fn footprints(soft: &Tensor, samples: &[&Stage2Sample], grid: (usize, usize)) -> Result<(Tensor, Vec<bool>)> {
    let (n, _, h, w) = soft.dims4();
    let hard = soft.map(|v| (v >= 0.5) as u8 as f32);
    let mut valid = Vec::with_capacity(n * grid.0 * grid.1);
    for (s, sample) in samples.iter().enumerate() {
        let m = BinaryMask::from_soft(h, w, &hard.data()[s * h * w..(s + 1) * h * w]);
        let corr = UVCorrespondence::new(grid.0, grid.1, vec![(0.0, 0.0); grid.0 * grid.1], m)?;
        valid.extend(corr.valid().iter().zip(&sample.texel_on_garment).map(|(&a, &b)| a && b));
    }
    Ok((hard, valid))
}

fn stack_texel_targets(samples: &[&Stage2Sample]) -> Vec<f64> {
    samples.iter().flat_map(|s| s.texel_target.iter().copied()).collect()
}

fn refs<'a>(samples: &'a [Stage2Sample], idx: &[usize]) -> Vec<&'a Stage2Sample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

fn field_of(list: &[Stage2Sample], f: impl Fn(&Stage2Sample) -> &Tensor) -> Vec<Tensor> {
    list.iter().map(|s| f(s).clone()).collect()
}

/// Mean reconstruction loss of `predictor` over all samples, in batches.
fn recon_eval(
    predictor: &CorrespondencePredictor,
    samples: &[Stage2Sample],
    warped: &[Tensor],
    garments: &[Tensor],
    batch: usize,
    channels: usize,
) -> Result<f64> {
    let order: Vec<usize> = (0..samples.len()).collect();
    let (mut sum, mut weight) = (0.0, 0.0);
    for idx in batches(&order, batch) {
        let soft = gather(warped, &idx);
        let refs = refs(samples, &idx);
        let (hard, valid) = footprints(&soft, &refs, predictor.grid)?;
        let n_valid = valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            continue;
        }
        let tape = Tape::new();
        let p = predictor.store.bind(&tape, Mode::Eval, false, 0);
        let coords = predictor.forward(&p, tape.constant(hard));
        let pred = texel_prediction(coords, Arc::new(gather(garments, &idx)), channels);
        let loss = losses::recon_loss_var(pred, &stack_texel_targets(&refs), &valid)?;
        sum += loss.item() as f64 * n_valid as f64;
        weight += n_valid as f64;
    }
    Ok(if weight > 0.0 { sum / weight } else { 0.0 })
}

/// Two phases. Contour phase: the warper is trained adversarially against
/// the ground-truth torso mask, with an L1 mask term; every batch carries
/// one extra empty-garment sample whose target is the empty mask.
/// Texture-mapping phase (warper frozen): the predictor minimises
/// `λ2·l_1 + λ3·l_recon` while the synthesizer trains adversarially with an
/// image L1 term on the detached `T_c^w`. `stage2.total` logs the full
/// weighted objective including the frozen contour GAN loss.
pub fn train_stage2(samples: &[Stage2Sample], cfg: &Stage2Config) -> Result<Stage2Outcome> {
    if samples.is_empty() {
        return Err(invalid("stage 2 needs a non-empty dataset"));
    }
    let channels = samples[0].texel_channels();
    if samples.iter().any(|s| s.texel_channels() != channels) {
        return Err(invalid("stage-2 samples disagree on texel target channels"));
    }
    let grid = (cfg.arch.uv_k, cfg.arch.uv_l);
    if samples.iter().any(|s| s.texel_on_garment.len() != grid.0 * grid.1) {
        return Err(invalid("texel targets do not match the configured UV grid"));
    }
    let mut model = Stage2Model::new(cfg.arch.clone(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747_2);
    let mut curves = Curves::new();
    let mut step = 0;

    let warper_inputs = field_of(samples, |s| &s.warper_input);
    let torso = field_of(samples, |s| &s.torso_mask);
    let mut warp_critic = Critic::new("contour_d", 1 + WARPER_INPUTS, cfg.lr, cfg.betas, &mut rng);
    let mut w_opt = Adam::new(&model.warper.store, cfg.lr, cfg.betas);
    for epoch in 0..cfg.contour_epochs {
        let order = shuffled(samples.len(), cfg.seed.wrapping_add(epoch as u64));
        for batch in batches(&order, cfg.batch_size) {
            let mut x = gather(&warper_inputs, &batch);
            let mut target = gather(&torso, &batch);
            append_empty_garment(&mut x, &mut target);
            let tape = Tape::new();
            let xv = tape.constant(x);
            let (logits, bound) = model.warper.forward(&tape, xv, true);
            let soft = logits.sigmoid();
            let tv = tape.constant(target);
            let fake = concat_channels(&[soft, xv]);
            let real = concat_channels(&[tv, xv]);
            let d_loss = critic_step(&mut warp_critic, &real, &fake);
            let g_adv = warp_critic.generator_loss(&tape, fake);
            let l1 = soft.l1_loss(tv);
            let total = g_adv.add(l1.scale(cfg.lambda_mask_l1));
            check_finite("stage2", step, "contour_l1", l1.item() as f64)?;
            check_finite("stage2", step, "contour_d", d_loss)?;
            curves.push(step, "stage2.contour_d", d_loss);
            curves.push(step, "stage2.contour_g_adv", g_adv.item() as f64);
            curves.push(step, "stage2.contour_l1", l1.item() as f64);
            let grads = tape.backward(total);
            apply_step(&mut model.warper.store, &mut w_opt, &bound, &grads);
            step += 1;
        }
    }

    let warped: Vec<Tensor> = warper_inputs.iter().map(|x| model.warper.soft_masks(x)).collect();
    let garments = field_of(samples, |s| &s.garment_masked);
    let projected = field_of(samples, |s| &s.projected_real);
    let pose_parsing = field_of(samples, |s| &s.pose_parsing);
    let identity = field_of(samples, |s| &s.identity);
    let tryon_gt = field_of(samples, |s| &s.tryon_gt);

    let recon_initial = recon_eval(&model.predictor, samples, &warped, &garments, cfg.batch_size, channels)?;
    check_finite("stage2", step, "recon_eval", recon_initial)?;
    curves.push(step, "stage2.recon_eval", recon_initial);

    let mut p_opt = Adam::new(&model.predictor.store, cfg.lr, cfg.betas);
    let mut s_opt = Adam::new(&model.synthesizer.store, cfg.lr, cfg.betas);
    let mut synth_critic = Critic::new("tryon_d", 3 + SYNTH_INPUTS, cfg.lr, cfg.betas, &mut rng);
    let (lambda_l1, lambda_recon) = (cfg.weights.lambda_l1 as f32, cfg.weights.lambda_recon as f32);
    for epoch in 0..cfg.texture_epochs {
        let order = shuffled(samples.len(), cfg.seed.wrapping_add((cfg.contour_epochs + epoch) as u64));
        for batch in batches(&order, cfg.batch_size) {
            let refs = refs(samples, &batch);
            let soft = gather(&warped, &batch);
            let (hard, valid) = footprints(&soft, &refs, grid)?;
            let garments_b = Arc::new(gather(&garments, &batch));
            let hard = Arc::new(hard);

            // Correspondence predictor.
            let tape = Tape::new();
            let p = model.predictor.store.bind(&tape, Mode::Train, true, 0);
            let coords = model.predictor.forward(&p, tape.leaf_shared(hard.clone(), false));
            let (h, w) = (hard.shape()[2], hard.shape()[3]);
            let field = resize_bilinear(coords, h, w);
            let tcw = grid_sample(field, garments_b.clone(), Some(hard.clone()));
            let l1 = tcw.l1_loss(tape.constant(gather(&projected, &batch)));
            let pred = texel_prediction(coords, garments_b.clone(), channels);
            let recon = if valid.iter().any(|&v| v) {
                losses::recon_loss_var(pred, &stack_texel_targets(&refs), &valid)?
            } else {
                tape.constant(Tensor::scalar(0.0))
            };
            let loss = l1.scale(lambda_l1).add(recon.scale(lambda_recon));
            let (l1_v, recon_v) = (l1.item() as f64, recon.item() as f64);
            check_finite("stage2", step, "l1", l1_v)?;
            check_finite("stage2", step, "recon", recon_v)?;
            let grads = tape.backward(loss);
            apply_step(&mut model.predictor.store, &mut p_opt, &p, &grads);
            let tcw_value = tcw.value();
            drop(grads);
            drop(tape);

            // Frozen contour GAN term, for the full objective.
            let cond = gather(&warper_inputs, &batch);
            let cat = |m: Tensor| {
                let t = Tape::new();
                (*concat_channels(&[t.constant(m), t.constant(cond.clone())]).value()).clone()
            };
            let d_real = warp_critic.probabilities(&cat(gather(&torso, &batch)));
            let d_fake = warp_critic.probabilities(&cat(soft));
            let (_, adv) = losses::gan_loss(&d_real, &d_fake)?;
            let total = cfg.weights.lambda_adv * adv + cfg.weights.lambda_l1 * l1_v + cfg.weights.lambda_recon * recon_v;
            curves.push(step, "stage2.l1", l1_v);
            curves.push(step, "stage2.recon", recon_v);
            curves.push(step, "stage2.adv", adv);
            curves.push(step, "stage2.total", total);

            // Synthesizer on the detached warped garment.
            let tape = Tape::new();
            let c = concat_channels(&[
                tape.constant(gather(&pose_parsing, &batch)),
                tape.leaf_shared(tcw_value, false),
                tape.constant(gather(&identity, &batch)),
            ]);
            let sp = model.synthesizer.store.bind(&tape, Mode::Train, true, 0);
            let out = model.synthesizer.forward(&sp, c);
            let gt = tape.constant(gather(&tryon_gt, &batch));
            let fake = concat_channels(&[out, c]);
            let real = concat_channels(&[gt, c]);
            let d_loss = critic_step(&mut synth_critic, &real, &fake);
            let g_adv = synth_critic.generator_loss(&tape, fake);
            let img_l1 = out.l1_loss(gt);
            let loss = g_adv.add(img_l1.scale(cfg.lambda_image_l1));
            check_finite("stage2", step, "synth_l1", img_l1.item() as f64)?;
            check_finite("stage2", step, "synth_d", d_loss)?;
            curves.push(step, "stage2.synth_d", d_loss);
            curves.push(step, "stage2.synth_g_adv", g_adv.item() as f64);
            curves.push(step, "stage2.synth_l1", img_l1.item() as f64);
            let grads = tape.backward(loss);
            apply_step(&mut model.synthesizer.store, &mut s_opt, &sp, &grads);
            step += 1;
        }
    }

    let recon_final = recon_eval(&model.predictor, samples, &warped, &garments, cfg.batch_size, channels)?;
    check_finite("stage2", step, "recon_eval", recon_final)?;
    curves.push(step, "stage2.recon_eval", recon_final);
    Ok(Stage2Outcome {
        model,
        curves,
        steps: step,
        recon_initial,
        recon_final,
    })
}

fn critic_step(critic: &mut Critic, real: &Var<'_>, fake: &Var<'_>) -> f64 {
    critic.update(&real.value(), &fake.value())
}

/// Append a copy of the first sample with the garment mask and target
/// cleared, so an absent garment maps to an empty silhouette.
fn append_empty_garment(x: &mut Tensor, target: &mut Tensor) {
    let mut extra = x.sample(0);
    let hw = extra.shape()[2] * extra.shape()[3];
    extra.data_mut()[..hw].fill(0.0);
    let empty = Tensor::zeros(target.sample(0).shape());
    let split = |t: &Tensor| -> Vec<Tensor> { (0..t.shape()[0]).map(|i| t.sample(i)).collect() };
    let (mut xs, mut ts) = (split(x), split(target));
    xs.push(extra);
    ts.push(empty);
    *x = Tensor::stack(&xs);
    *target = Tensor::stack(&ts);
}

/// Fit the predictor so that the masks in `masks` map to the texel
/// coordinates `targets` (`[N, 2, K, L]`), by L1 regression. Returns the
/// final mean absolute error in pixels.
pub fn fit_predictor_coords(
    pred: &mut CorrespondencePredictor,
    masks: &Tensor,
    targets: &Tensor,
    steps: usize,
    lr: f32,
) -> Result<f64> {
    let (k, l) = pred.grid;
    let (n, _, _, _) = masks.dims4();
    if targets.shape() != [n, 2, k, l] {
        return Err(invalid(format!("targets must be [{n}, 2, {k}, {l}], got {:?}", targets.shape())));
    }
    let mut opt = Adam::new(&pred.store, lr, (0.9, 0.999));
    let mut last = f64::NAN;
    for step in 0..steps {
        let tape = Tape::new();
        let p = pred.store.bind(&tape, Mode::Train, true, 0);
        let coords = pred.forward(&p, tape.constant(masks.clone()));
        let loss = coords.l1_loss(tape.constant(targets.clone()));
        last = check_finite("predictor_fit", step, "coord_l1", loss.item() as f64)?;
        let grads = tape.backward(loss);
        apply_step(&mut pred.store, &mut opt, &p, &grads);
    }
    Ok(last)
}

/// Texel coordinate tensor `[1, 2, K, L]` of a correspondence.
pub fn coords_tensor(corr: &UVCorrespondence) -> Tensor {
    let (k, l) = corr.grid();
    let mut data = vec![0.0; 2 * k * l];
    for (i, &(y, x)) in corr.coords().iter().enumerate() {
        data[i] = y as f32;
        data[k * l + i] = x as f32;
    }
    Tensor::new(&[1, 2, k, l], data)
}
