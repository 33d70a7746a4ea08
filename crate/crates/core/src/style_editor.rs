//! Stage 3: per-region shape latents (VAE) and texture features, a
//! fashionability classifier, and minimal edits of the style code by
//! gradient ascent on the classifier score.
//!
//! Naming follows the figure caption: `t_v` is the per-region shape latent,
//! `s_v` the per-region texture feature.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use vton_tensor::checkpoint::Checkpoint;
use vton_tensor::nn::{Bound, Conv2d, Linear, Mode, ParamStore};
use vton_tensor::optim::Adam;
use vton_tensor::{concat_channels, Tape, Tensor, Var};

use crate::error::{invalid, Result, VtonError};
use crate::eval_metrics::ImageClassifier;
use crate::image::{BinaryMask, ImageTensor};
use crate::losses;
use crate::nets::{coord_channels, prob_from_logit, ConvClassifier, Critic};
use crate::segmentation::{label, SegmentationMap, Vocabulary, NUM_LABELS};
use crate::synth::PatternKind;
use crate::train_util::{apply_step, batches, check_finite, gather, linear_decay_lr, shuffled, Curves};

/// Sinusoid frequencies of the generator's positional features.
const FOURIER_FREQS: [f32; 4] = [1.0, 2.0, 4.0, 8.0];
const POS_CHANNELS: usize = 2 + 4 * FOURIER_FREQS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage3Arch {
    /// Shape latent size `d_s` per region.
    pub shape_dim: usize,
    /// Texture feature size `d_t` per region.
    pub texture_dim: usize,
    pub generator_width: usize,
}

impl Default for Stage3Arch {
    fn default() -> Self {
        Self {
            shape_dim: 8,
            texture_dim: 16,
            generator_width: 64,
        }
    }
}

/// Per-region style code: shape latents `t_v` and texture features `s_v`,
/// one row per vocabulary label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    pub shape: Vec<Vec<f32>>,
    pub texture: Vec<Vec<f32>>,
}

impl StyleCode {
    pub fn is_finite(&self) -> bool {
        self.shape.iter().chain(&self.texture).flatten().all(|v| v.is_finite())
    }

    /// Euclidean distance over both parts.
    pub fn distance(&self, other: &StyleCode) -> f64 {
        let pairs = self.shape.iter().zip(&other.shape).chain(self.texture.iter().zip(&other.texture));
        pairs
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    fn flat(rows: &[Vec<f32>]) -> Vec<f32> {
        rows.iter().flatten().copied().collect()
    }
}

/// Shape VAE. The encoder sees one region's binary image (plus coordinate
/// channels); the decoder maps the concatenated latents of all regions to
/// segmentation logits.
#[derive(Clone, Debug)]
pub struct ShapeVAE {
    enc: [Conv2d; 3],
    enc_fc: Linear,
    dec_fc: Linear,
    dec: [Conv2d; 4],
    dim: usize,
    height: usize,
    width: usize,
    store: ParamStore,
}

const VAE_WIDTH: usize = 32;

impl ShapeVAE {
    /// `height` and `width` must be divisible by 8.
    pub fn new(dim: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
            return Err(invalid(format!("shape VAE needs sides divisible by 8, got {height}x{width}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let flat = VAE_WIDTH * (height / 8) * (width / 8);
        let c = |s: &mut ParamStore, n: &str, i, o, st, r: &mut _| Conv2d::new(s, &format!("vae.{n}"), i, o, 3, st, r);
        let enc = [
            c(&mut s, "enc1", 3, 8, 2, &mut rng),
            c(&mut s, "enc2", 8, VAE_WIDTH, 2, &mut rng),
            c(&mut s, "enc3", VAE_WIDTH, VAE_WIDTH, 2, &mut rng),
        ];
        let enc_fc = Linear::new(&mut s, "vae.enc_fc", flat, 2 * dim, 0.1, &mut rng);
        let dec_fc = Linear::new(&mut s, "vae.dec_fc", NUM_LABELS * dim, flat, 1.0, &mut rng);
        let dec = [
            c(&mut s, "dec1", VAE_WIDTH, VAE_WIDTH, 1, &mut rng),
            c(&mut s, "dec2", VAE_WIDTH, VAE_WIDTH, 1, &mut rng),
            c(&mut s, "dec3", VAE_WIDTH, VAE_WIDTH, 1, &mut rng),
            c(&mut s, "dec_out", VAE_WIDTH, NUM_LABELS, 1, &mut rng),
        ];
        Ok(Self {
            enc,
            enc_fc,
            dec_fc,
            dec,
            dim,
            height,
            width,
            store: s,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(mu, logvar)`, each `[M, d_s]`, for region images `[M, 1, H, W]`.
    pub fn encode<'t>(&self, p: &Bound<'t>, regions: Var<'t>) -> (Var<'t>, Var<'t>) {
        let tape = regions.tape();
        let (m, _, h, w) = regions.value().dims4();
        let mut x = concat_channels(&[regions, tape.constant(coord_channels(m, h, w))]);
        for conv in &self.enc {
            x = conv.forward(p, x).relu();
        }
        let flat = x.value().len() / m;
        let out = self.enc_fc.forward(p, x.reshape(&[m, flat])).reshape(&[m, 2 * self.dim, 1, 1]);
        let mu = out.narrow_channels(0, self.dim).reshape(&[m, self.dim]);
        let logvar = out.narrow_channels(self.dim, self.dim).reshape(&[m, self.dim]);
        (mu, logvar)
    }

    /// Segmentation logits `[N, L, H, W]` from latents `[N, L * d_s]`.
    pub fn decode<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Var<'t> {
        let n = z.value().shape()[0];
        let mut x = self
            .dec_fc
            .forward(p, z)
            .reshape(&[n, VAE_WIDTH, self.height / 8, self.width / 8])
            .relu();
        for conv in &self.dec[..3] {
            x = conv.forward(p, x.upsample2x()).relu();
        }
        self.dec[3].forward(p, x)
    }
}

/// `[L, 1, H, W]` stack of one binary image per label.
fn region_stack(parsing: &SegmentationMap) -> Tensor {
    let (h, w) = (parsing.height(), parsing.width());
    parsing.to_one_hot().reshape(&[parsing.vocabulary().len(), 1, h, w])
}

/// Encode one region image. Eval mode: `z = mu`.
pub fn encode_shape(vae: &ShapeVAE, region_image: &BinaryMask) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    if (region_image.height(), region_image.width()) != (vae.height, vae.width) {
        return Err(invalid(format!(
            "region image is {}x{}, VAE trained at {}x{}",
            region_image.height(),
            region_image.width(),
            vae.height,
            vae.width
        )));
    }
    let tape = Tape::new();
    let p = vae.store.bind(&tape, Mode::Eval, false, 0);
    let (mu, lv) = vae.encode(&p, tape.constant(region_image.to_tensor()));
    let mu = mu.value().data().to_vec();
    Ok((mu.clone(), lv.value().data().to_vec(), mu))
}

/// Train-mode draw `z = mu + exp(logvar / 2) · ε`.
pub fn sample_latent(mu: &[f32], logvar: &[f32], rng: &mut impl rand::Rng) -> Vec<f32> {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let eps: f32 = StandardNormal.sample(rng);
            m + (0.5 * lv).exp() * eps
        })
        .collect()
}

/// KL divergence to the standard normal, summed over dimensions.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> f64 {
    losses::kl_loss(mu, logvar)
}

/// Texture GAN losses `(g_loss, d_loss)` from critic probabilities.
pub fn texture_gan_loss(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    losses::gan_loss(d_real, d_fake)
}

/// `[N, POS_CHANNELS, H, W]`: normalised coordinates and their sinusoids.
fn positional_features(n: usize, h: usize, w: usize) -> Tensor {
    let coords = coord_channels(1, h, w);
    let hw = h * w;
    let mut plane = coords.data().to_vec();
    for &f in &FOURIER_FREQS {
        for axis in 0..2 {
            let src = &coords.data()[axis * hw..(axis + 1) * hw];
            plane.extend(src.iter().map(|&v| (std::f32::consts::PI * f * v).sin()));
            plane.extend(src.iter().map(|&v| (std::f32::consts::PI * f * v).cos()));
        }
    }
    let one = Tensor::new(&[1, POS_CHANNELS, h, w], plane);
    Tensor::stack(&vec![one; n])
}

/// Texture encoder `E_t` and per-pixel generator `G_t`. The generator uses
/// 1×1 convolutions only, so each pixel depends on its own region's
/// feature, its label and its position.
#[derive(Clone, Debug)]
pub struct TextureEncoderGenerator {
    enc: [Conv2d; 2],
    gen: [Conv2d; 3],
    dim: usize,
    store: ParamStore,
}

impl TextureEncoderGenerator {
    pub fn new(dim: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let enc = [
            Conv2d::new(&mut s, "texture.enc1", 3, dim, 3, 1, &mut rng),
            Conv2d::new(&mut s, "texture.enc2", dim, dim, 3, 1, &mut rng),
        ];
        let gen = [
            Conv2d::new(&mut s, "texture.gen1", dim + NUM_LABELS + POS_CHANNELS, width, 1, 1, &mut rng),
            Conv2d::new(&mut s, "texture.gen2", width, width, 1, 1, &mut rng),
            Conv2d::with_options(&mut s, "texture.gen_out", width, 3, 1, 1, 0, true, 0.5, &mut rng),
        ];
        Self { enc, gen, dim, store: s }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Feature map `[N, d_t, H, W]`.
    pub fn features<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Var<'t> {
        let h = self.enc[0].forward(p, image).relu();
        self.enc[1].forward(p, h)
    }

    /// Image `[N, 3, H, W]` in `[0, 1]` from per-region features
    /// `[N, L, d_t]` and a (one-hot or soft) region map `[N, L, H, W]`.
    pub fn render<'t>(&self, p: &Bound<'t>, codes: Var<'t>, regions: Var<'t>) -> Var<'t> {
        let tape = regions.tape();
        let (n, _, h, w) = regions.value().dims4();
        let x = concat_channels(&[
            codes.region_broadcast(regions),
            regions,
            tape.constant(positional_features(n, h, w)),
        ]);
        let x = self.gen[0].forward(p, x).relu();
        let x = self.gen[1].forward(p, x).relu();
        self.gen[2].forward(p, x).sigmoid()
    }
}

fn check_regions(image: &ImageTensor, regions: &SegmentationMap) -> Result<()> {
    if !image.same_size(regions.height(), regions.width()) || image.channels() != 3 {
        return Err(invalid("image and region map must be the same size, image RGB"));
    }
    if regions.vocabulary().len() != NUM_LABELS {
        return Err(invalid("style editing expects the standard label set"));
    }
    Ok(())
}

/// Per-region texture features `s_v`: encoder features averaged over each
/// label's pixels; zero for empty regions.
pub fn encode_texture(enc: &TextureEncoderGenerator, image: &ImageTensor, regions: &SegmentationMap) -> Result<Vec<Vec<f32>>> {
    check_regions(image, regions)?;
    let tape = Tape::new();
    let p = enc.store.bind(&tape, Mode::Eval, false, 0);
    let feats = enc.features(&p, tape.constant(image.to_tensor()));
    let sv = feats.region_mean(tape.constant(regions.to_one_hot())).value();
    Ok(sv.data().chunks(enc.dim).map(<[f32]>::to_vec).collect())
}

/// Scores an (image, region map) pair for fashionability in `(0, 1)`.
pub trait FashionScorer: Send + Sync {
    fn id(&self) -> String;

    /// Score of a single image `[1, 3, H, W]` with region weights
    /// `[1, L, H, W]`, as a tape op. `None` when the scorer cannot be
    /// differentiated.
    fn score_var<'t>(&self, tape: &'t Tape, image: Var<'t>, regions: Var<'t>) -> Option<Var<'t>>;

    fn score(&self, image: &ImageTensor, regions: &SegmentationMap) -> Result<f64> {
        check_regions(image, regions)?;
        let tape = Tape::new();
        let s = self
            .score_var(&tape, tape.constant(image.to_tensor()), tape.constant(regions.to_one_hot()))
            .ok_or_else(|| VtonError::FailedPrecondition(format!("scorer {} is not differentiable", self.id())))?;
        Ok(s.item() as f64)
    }
}

/// Prefers a target mean colour on one region:
/// `sigmoid(a − b · ‖mean colour − target‖²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorPreferenceClassifier {
    pub target: [f32; 3],
    pub region: u8,
    pub a: f32,
    pub b: f32,
}

impl ColorPreferenceClassifier {
    pub fn new(target: [f32; 3]) -> Self {
        Self {
            target,
            region: label::TORSO_GARMENT,
            a: 1.0,
            b: 4.0,
        }
    }
}

impl FashionScorer for ColorPreferenceClassifier {
    fn id(&self) -> String {
        format!("color-preference:{:?}", self.target)
    }

    fn score_var<'t>(&self, tape: &'t Tape, image: Var<'t>, regions: Var<'t>) -> Option<Var<'t>> {
        let l = regions.value().shape()[1];
        let means = image.region_mean(regions).reshape(&[1, l, 3, 1]);
        let mean = means.narrow_channels(self.region as usize, 1).reshape(&[3]);
        let d = mean.sub(tape.constant(Tensor::new(&[3], self.target.to_vec())));
        Some(d.square().sum().scale(-self.b).add_scalar(self.a).sigmoid())
    }
}

/// Learned two-class fashionability classifier over `[image, region one-hot]`.
#[derive(Clone, Debug)]
pub struct LearnedFashionClassifier {
    net: ConvClassifier,
    store: ParamStore,
}

impl LearnedFashionClassifier {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = ConvClassifier::new(&mut store, "fashion", 3 + NUM_LABELS, 2, &mut rng);
        Self { net, store }
    }

    fn logits<'t>(&self, p: &Bound<'t>, image: Var<'t>, regions: Var<'t>) -> Var<'t> {
        self.net.forward(p, concat_channels(&[image, regions]))
    }
}

impl FashionScorer for LearnedFashionClassifier {
    fn id(&self) -> String {
        "learned-fashion".into()
    }

    fn score_var<'t>(&self, tape: &'t Tape, image: Var<'t>, regions: Var<'t>) -> Option<Var<'t>> {
        let p = self.store.bind(tape, Mode::Eval, false, 0);
        let z = self.logits(&p, image, regions).reshape(&[1, 2, 1, 1]);
        Some(z.softmax_channels().narrow_channels(1, 1).reshape(&[1]))
    }
}

/// Garment-pattern classifier used for the Inception Score.
#[derive(Clone, Debug)]
pub struct PatternClassifier {
    net: ConvClassifier,
    store: ParamStore,
}

impl PatternClassifier {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = ConvClassifier::new(&mut store, "pattern", 3, PatternKind::ALL.len(), &mut rng);
        Self { net, store }
    }

    pub fn checkpoint(&self, height: usize, width: usize) -> Checkpoint {
        let classes: Vec<_> = PatternKind::ALL.iter().map(|k| serde_json::to_value(k).unwrap()).collect();
        Checkpoint::from_stores(
            json!({"kind": "is_classifier", "classes": classes, "height": height, "width": width}),
            &[("pattern", &self.store)],
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("kind").and_then(|v| v.as_str()) != Some("is_classifier") {
            return Err(VtonError::FailedPrecondition("checkpoint is not an IS classifier".into()));
        }
        let mut c = Self::new(0);
        ckpt.restore("pattern", &mut c.store)?;
        Ok(c)
    }

    pub fn probabilities_batch(&self, images: &Tensor) -> Vec<Vec<f64>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, Mode::Eval, false, 0);
        let z = self.net.forward(&p, tape.constant(images.clone())).value();
        let k = z.shape()[1];
        z.data()
            .chunks(k)
            .map(|row| {
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect()
    }
}

impl ImageClassifier for PatternClassifier {
    fn id(&self) -> String {
        "pattern-cnn".into()
    }

    fn class_probabilities(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        if image.channels() != 3 {
            return Err(invalid("pattern classifier expects RGB images"));
        }
        Ok(self.probabilities_batch(&image.to_tensor()).remove(0))
    }
}

/// The stage-3 generators and the learned fashion classifier.
#[derive(Clone, Debug)]
pub struct StyleModel {
    pub arch: Stage3Arch,
    pub vae: ShapeVAE,
    pub texture: TextureEncoderGenerator,
    pub fashion: LearnedFashionClassifier,
}

impl StyleModel {
    pub fn new(arch: Stage3Arch, height: usize, width: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            vae: ShapeVAE::new(arch.shape_dim, height, width, seed)?,
            texture: TextureEncoderGenerator::new(arch.texture_dim, arch.generator_width, seed.wrapping_add(1)),
            fashion: LearnedFashionClassifier::new(seed.wrapping_add(2)),
            arch,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.vae.height, self.vae.width)
    }

    pub fn checkpoint(&self, step: usize) -> Checkpoint {
        let meta = json!({
            "stage": 3,
            "arch": self.arch,
            "step": step,
            "height": self.vae.height,
            "width": self.vae.width,
        });
        Checkpoint::from_stores(
            meta,
            &[
                ("vae", &self.vae.store),
                ("texture", &self.texture.store),
                ("fashion", &self.fashion.store),
            ],
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("stage").and_then(|v| v.as_u64()) != Some(3) {
            return Err(VtonError::FailedPrecondition("checkpoint is not a stage-3 checkpoint".into()));
        }
        let arch: Stage3Arch = serde_json::from_value(ckpt.meta["arch"].clone())?;
        let dim = |k: &str| ckpt.meta[k].as_u64().map(|v| v as usize).ok_or_else(|| invalid(format!("checkpoint lacks {k}")));
        let mut m = Self::new(arch, dim("height")?, dim("width")?, 0)?;
        ckpt.restore("vae", &mut m.vae.store)?;
        ckpt.restore("texture", &mut m.texture.store)?;
        ckpt.restore("fashion", &mut m.fashion.store)?;
        Ok(m)
    }

    /// Style code of a try-on image under its region map.
    pub fn encode(&self, image: &ImageTensor, regions: &SegmentationMap) -> Result<StyleCode> {
        check_regions(image, regions)?;
        if (regions.height(), regions.width()) != self.size() {
            return Err(invalid("image size differs from the stage-3 training size"));
        }
        let tape = Tape::new();
        let p = self.vae.store.bind(&tape, Mode::Eval, false, 0);
        let (mu, _) = self.vae.encode(&p, tape.constant(region_stack(regions)));
        let shape = mu.value().data().chunks(self.vae.dim).map(<[f32]>::to_vec).collect();
        Ok(StyleCode {
            shape,
            texture: encode_texture(&self.texture, image, regions)?,
        })
    }

    fn check_code(&self, code: &StyleCode) -> Result<()> {
        let ok = code.shape.len() == NUM_LABELS
            && code.texture.len() == NUM_LABELS
            && code.shape.iter().all(|r| r.len() == self.vae.dim)
            && code.texture.iter().all(|r| r.len() == self.texture.dim);
        if !ok {
            return Err(invalid("style code does not match the model's region and latent sizes"));
        }
        if !code.is_finite() {
            return Err(invalid("style code has non-finite entries"));
        }
        Ok(())
    }

    /// Decoded layout `I_t^u` (argmax of `G_s`).
    pub fn decode_layout(&self, code: &StyleCode) -> Result<SegmentationMap> {
        self.check_code(code)?;
        let tape = Tape::new();
        let p = self.vae.store.bind(&tape, Mode::Eval, false, 0);
        let z = tape.constant(Tensor::new(&[1, NUM_LABELS * self.vae.dim], StyleCode::flat(&code.shape)));
        SegmentationMap::from_logits(&self.vae.decode(&p, z).value(), 0, Vocabulary::standard())
    }

    /// `G_t` rendering of a code on a fixed layout.
    pub fn render_on(&self, code: &StyleCode, layout: &SegmentationMap) -> Result<ImageTensor> {
        self.check_code(code)?;
        let tape = Tape::new();
        let p = self.texture.store.bind(&tape, Mode::Eval, false, 0);
        let codes = tape.constant(self.texture_tensor(code));
        let img = self.texture.render(&p, codes, tape.constant(layout.to_one_hot()));
        ImageTensor::from_tensor(&img.value(), 0)
    }

    /// `(I_t^u, I_t^s)`: decoded layout and the styled image on it.
    pub fn render(&self, code: &StyleCode) -> Result<(SegmentationMap, ImageTensor)> {
        let layout = self.decode_layout(code)?;
        let image = self.render_on(code, &layout)?;
        Ok((layout, image))
    }

    fn texture_tensor(&self, code: &StyleCode) -> Tensor {
        Tensor::new(&[1, NUM_LABELS, self.texture.dim], StyleCode::flat(&code.texture))
    }
}

/// Which parts of the code an edit may change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    /// Label names whose texture features are editable.
    pub editable_regions: Vec<String>,
    /// Also edit the shape latents of the editable regions.
    #[serde(default)]
    pub edit_shape: bool,
    pub steps: usize,
    pub step_size: f32,
    /// Radius of the L2 ball around the starting code.
    pub budget: f32,
}

#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub code: StyleCode,
    /// `I_t^u`: layout decoded from the edited shape latents.
    pub layout: SegmentationMap,
    /// `I_t^s`: styled image.
    pub styled: ImageTensor,
    /// Score of the starting code followed by one entry per accepted step.
    pub score_trace: Vec<f64>,
    pub code_delta_norm: f64,
}

/// Halvings tried before an edit step is abandoned.
pub const MAX_HALVINGS: usize = 5;

struct Editable {
    regions: Vec<usize>,
    shape: bool,
    d_s: usize,
    d_t: usize,
}

impl Editable {
    fn read(&self, code: &StyleCode) -> Vec<f32> {
        let mut v: Vec<f32> = self.regions.iter().flat_map(|&r| code.texture[r].iter().copied()).collect();
        if self.shape {
            v.extend(self.regions.iter().flat_map(|&r| code.shape[r].iter().copied()));
        }
        v
    }

    fn write(&self, code: &mut StyleCode, v: &[f32]) {
        let mut it = v.iter().copied();
        for &r in &self.regions {
            for x in code.texture[r].iter_mut() {
                *x = it.next().unwrap();
            }
        }
        if self.shape {
            for &r in &self.regions {
                for x in code.shape[r].iter_mut() {
                    *x = it.next().unwrap();
                }
            }
        }
    }

    /// Gradient entries for the editable part, from full gradients of the
    /// texture `[L, d_t]` and shape `[L, d_s]` codes.
    fn gather(&self, texture: &[f32], shape: Option<&[f32]>) -> Vec<f32> {
        let mut v: Vec<f32> = self
            .regions
            .iter()
            .flat_map(|&r| texture[r * self.d_t..(r + 1) * self.d_t].iter().copied())
            .collect();
        if let (true, Some(s)) = (self.shape, shape) {
            v.extend(self.regions.iter().flat_map(|&r| s[r * self.d_s..(r + 1) * self.d_s].iter().copied()));
        }
        v
    }
}

fn score_code(model: &StyleModel, scorer: &dyn FashionScorer, code: &StyleCode) -> Result<f64> {
    let (layout, image) = model.render(code)?;
    scorer.score(&image, &layout)
}

/// Gradient of the score with respect to the editable entries. With shape
/// editing the layout enters softly through `softmax(G_s)`.
fn score_gradient(model: &StyleModel, scorer: &dyn FashionScorer, code: &StyleCode, ed: &Editable) -> Result<Vec<f32>> {
    let tape = Tape::new();
    let vp = model.vae.store.bind(&tape, Mode::Eval, false, 0);
    let tp = model.texture.store.bind(&tape, Mode::Eval, false, 0);
    let tex = tape.variable(model.texture_tensor(code));
    let z = Tensor::new(&[1, NUM_LABELS * model.vae.dim], StyleCode::flat(&code.shape));
    let (shape_var, regions) = if ed.shape {
        let z = tape.variable(z);
        (Some(z), model.vae.decode(&vp, z).softmax_channels())
    } else {
        let layout = model.decode_layout(code)?;
        (None, tape.constant(layout.to_one_hot()))
    };
    let image = model.texture.render(&tp, tex, regions);
    let score = scorer
        .score_var(&tape, image, regions)
        .ok_or_else(|| VtonError::FailedPrecondition(format!("scorer {} is not differentiable", scorer.id())))?;
    let grads = tape.backward(score);
    let gt = grads.get(tex).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; tex.value().len()]);
    let gs = shape_var.and_then(|v| grads.get(v).map(|t| t.data().to_vec()));
    Ok(ed.gather(&gt, gs.as_deref()))
}

/// Minimal edit of `code`: normalised gradient ascent on the classifier
/// score over the editable entries. Each step tries `step_size`, halving
/// up to [`MAX_HALVINGS`] times until the score strictly increases, and
/// projects onto the L2 ball of radius `budget` around the starting code.
/// Editing stops early when no step improves the score.
pub fn minimal_edit(
    code: &StyleCode,
    scorer: &dyn FashionScorer,
    model: &StyleModel,
    req: &EditRequest,
) -> Result<EditOutcome> {
    minimal_edit_anchored(code, code, scorer, model, req)
}

/// [`minimal_edit`] continuing from `code` with the budget ball centred on
/// `anchor`, so repeated calls bound the total displacement from `anchor`.
/// `code_delta_norm` is measured from `anchor`.
pub fn minimal_edit_anchored(
    code: &StyleCode,
    anchor: &StyleCode,
    scorer: &dyn FashionScorer,
    model: &StyleModel,
    req: &EditRequest,
) -> Result<EditOutcome> {
    model.check_code(code)?;
    model.check_code(anchor)?;
    if !(req.budget >= 0.0 && req.budget.is_finite()) || !(req.step_size > 0.0 && req.step_size.is_finite()) {
        return Err(invalid("budget must be >= 0 and step_size > 0"));
    }
    let vocab = Vocabulary::standard();
    let mut regions = Vec::new();
    for name in &req.editable_regions {
        regions.push(vocab.require(name)? as usize);
    }
    regions.sort_unstable();
    regions.dedup();
    let ed = Editable {
        regions,
        shape: req.edit_shape,
        d_s: model.vae.dim,
        d_t: model.texture.dim,
    };
    let origin = ed.read(anchor);
    let mut current = code.clone();
    let mut x = ed.read(code);
    let mut trace = vec![score_code(model, scorer, code)?];
    for _ in 0..req.steps {
        if ed.regions.is_empty() {
            break;
        }
        let g = score_gradient(model, scorer, &current, &ed)?;
        let norm = g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        let mut eta = req.step_size as f64;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = project(
                &x.iter().zip(&g).map(|(&xi, &gi)| (xi as f64 + eta * gi as f64 / norm) as f32).collect::<Vec<_>>(),
                &origin,
                req.budget as f64,
            );
            let mut c = current.clone();
            ed.write(&mut c, &cand);
            let s = score_code(model, scorer, &c)?;
            if s > *trace.last().unwrap() {
                accepted = Some((cand, c, s));
                break;
            }
            eta *= 0.5;
        }
        match accepted {
            Some((cand, c, s)) => {
                x = cand;
                current = c;
                trace.push(s);
            }
            None => break,
        }
    }
    let (layout, styled) = model.render(&current)?;
    Ok(EditOutcome {
        code_delta_norm: current.distance(anchor),
        code: current,
        layout,
        styled,
        score_trace: trace,
    })
}

/// Project `x` onto the L2 ball of `radius` around `center`.
fn project(x: &[f32], center: &[f32], radius: f64) -> Vec<f32> {
    let d = x.iter().zip(center).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
    if d <= radius {
        return x.to_vec();
    }
    let k = radius / d;
    x.iter().zip(center).map(|(&a, &b)| (b as f64 + (a - b) as f64 * k) as f32).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage3Config {
    pub vae_const_epochs: usize,
    pub vae_decay_epochs: usize,
    pub gan_const_epochs: usize,
    pub gan_decay_epochs: usize,
    pub classifier_epochs: usize,
    /// Epochs of the pattern classifier used for the Inception Score.
    pub pattern_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub betas: (f32, f32),
    pub classifier_lr: f32,
    pub classifier_weight_decay: f32,
    pub beta_kl: f32,
    /// Weight of the image L1 term next to the texture adversarial loss.
    pub lambda_l1: f32,
    pub seed: u64,
    pub arch: Stage3Arch,
}

/// One stage-3 example: a try-on image with its region map and labels.
#[derive(Clone, Debug)]
pub struct Stage3Sample {
    pub image: ImageTensor,
    pub parsing: SegmentationMap,
    pub fashionable: bool,
    pub pattern: Option<PatternKind>,
}

pub struct Stage3Outcome {
    pub model: StyleModel,
    /// Trained when every sample carries a pattern label.
    pub pattern_classifier: Option<PatternClassifier>,
    pub curves: Curves,
    pub steps: usize,
    /// VAE pixel accuracy on the training regions with `z = mu`.
    pub vae_recon_accuracy: f64,
}

struct Stage3Data {
    images: Vec<Tensor>,
    onehots: Vec<Tensor>,
    regions: Vec<Tensor>,
    labels: Vec<Vec<u8>>,
}

/// VAE, texture GAN and classifier trainings, one after the other. The
/// VAE and GAN learning rates stay constant for the first phase and then
/// decay linearly to zero.
pub fn train_stage3(samples: &[Stage3Sample], cfg: &Stage3Config) -> Result<Stage3Outcome> {
    let first = samples.first().ok_or_else(|| invalid("stage 3 needs a non-empty dataset"))?;
    let (h, w) = (first.parsing.height(), first.parsing.width());
    for s in samples {
        check_regions(&s.image, &s.parsing)?;
        if (s.parsing.height(), s.parsing.width()) != (h, w) {
            return Err(invalid("stage-3 samples differ in size"));
        }
    }
    let data = Stage3Data {
        images: samples.iter().map(|s| s.image.to_tensor()).collect(),
        onehots: samples.iter().map(|s| s.parsing.to_one_hot()).collect(),
        regions: samples.iter().map(|s| region_stack(&s.parsing)).collect(),
        labels: samples.iter().map(|s| s.parsing.labels().to_vec()).collect(),
    };
    let mut model = StyleModel::new(cfg.arch.clone(), h, w, cfg.seed)?;
    let mut curves = Curves::new();
    let mut step = 0;
    train_vae(&mut model.vae, &data, cfg, &mut curves, &mut step)?;
    let vae_recon_accuracy = vae_accuracy(&model.vae, &data, cfg.batch_size)?;
    curves.push(step, "stage3.vae_recon_acc", vae_recon_accuracy);
    train_texture(&mut model.texture, &data, cfg, &mut curves, &mut step)?;

    let fashion_labels: Vec<u8> = samples.iter().map(|s| s.fashionable as u8).collect();
    let fashion_inputs: Vec<Tensor> = data
        .images
        .iter()
        .zip(&data.onehots)
        .map(|(i, m)| {
            let t = Tape::new();
            (*concat_channels(&[t.constant(i.clone()), t.constant(m.clone())]).value()).clone()
        })
        .collect();
    let fc = &mut model.fashion;
    let epochs = cfg.classifier_epochs;
    train_classifier(&fc.net, &mut fc.store, &fashion_inputs, &fashion_labels, cfg, epochs, "fashion", &mut curves, &mut step)?;

    let pattern_classifier = match samples.iter().map(|s| s.pattern).collect::<Option<Vec<_>>>() {
        Some(kinds) => {
            let mut pc = PatternClassifier::new(cfg.seed.wrapping_add(3));
            let labels: Vec<u8> = kinds.iter().map(|k| k.class_index() as u8).collect();
            let epochs = cfg.pattern_epochs;
            train_classifier(&pc.net, &mut pc.store, &data.images, &labels, cfg, epochs, "pattern", &mut curves, &mut step)?;
            Some(pc)
        }
        None => None,
    };
    Ok(Stage3Outcome {
        model,
        pattern_classifier,
        curves,
        steps: step,
        vae_recon_accuracy,
    })
}

fn train_vae(vae: &mut ShapeVAE, data: &Stage3Data, cfg: &Stage3Config, curves: &mut Curves, step: &mut usize) -> Result<()> {
    let mut opt = Adam::new(&vae.store, cfg.lr, cfg.betas);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a3e);
    let epochs = cfg.vae_const_epochs + cfg.vae_decay_epochs;
    let (h, w) = (vae.height, vae.width);
    for epoch in 0..epochs {
        opt.lr = linear_decay_lr(cfg.lr, epoch as f64, cfg.vae_const_epochs as f64, cfg.vae_decay_epochs as f64);
        let order = shuffled(data.images.len(), cfg.seed.wrapping_add(100 + epoch as u64));
        for batch in batches(&order, cfg.batch_size) {
            let n = batch.len();
            let regions: Vec<Tensor> = batch.iter().map(|&i| data.regions[i].clone()).collect();
            let x = Tensor::new(&[n * NUM_LABELS, 1, h, w], regions.iter().flat_map(|t| t.data().iter().copied()).collect());
            let labels: Vec<u8> = batch.iter().flat_map(|&i| data.labels[i].iter().copied()).collect();
            let tape = Tape::new();
            let p = vae.store.bind(&tape, Mode::Train, true, 0);
            let (mu, lv) = vae.encode(&p, tape.constant(x));
            let eps: Vec<f32> = (0..mu.value().len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = lv
                .scale(0.5)
                .exp()
                .mul(tape.constant(Tensor::new(&mu.shape(), eps)))
                .add(mu)
                .reshape(&[n, NUM_LABELS * vae.dim]);
            let logits = vae.decode(&p, z);
            let ce = losses::cross_entropy_var(logits, Arc::new(labels))?;
            let kl = losses::kl_var(mu, lv, n);
            let loss = ce.scale((h * w) as f32).add(kl.scale(cfg.beta_kl));
            check_finite("stage3", *step, "vae_ce", ce.item() as f64)?;
            check_finite("stage3", *step, "vae_kl", kl.item() as f64)?;
            curves.push(*step, "stage3.vae_ce", ce.item() as f64);
            curves.push(*step, "stage3.vae_kl", kl.item() as f64);
            let grads = tape.backward(loss);
            apply_step(&mut vae.store, &mut opt, &p, &grads);
            *step += 1;
        }
    }
    Ok(())
}

fn vae_accuracy(vae: &ShapeVAE, data: &Stage3Data, batch: usize) -> Result<f64> {
    let (h, w) = (vae.height, vae.width);
    let order: Vec<usize> = (0..data.images.len()).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for idx in batches(&order, batch) {
        let n = idx.len();
        let x = Tensor::new(
            &[n * NUM_LABELS, 1, h, w],
            idx.iter().flat_map(|&i| data.regions[i].data().iter().copied()).collect(),
        );
        let tape = Tape::new();
        let p = vae.store.bind(&tape, Mode::Eval, false, 0);
        let (mu, _) = vae.encode(&p, tape.constant(x));
        let logits = vae.decode(&p, mu.reshape(&[n, NUM_LABELS * vae.dim])).value();
        for (s, &i) in idx.iter().enumerate() {
            let pred = SegmentationMap::from_logits(&logits, s, Vocabulary::standard())?;
            hits += pred.labels().iter().zip(&data.labels[i]).filter(|(a, b)| a == b).count();
            total += h * w;
        }
    }
    Ok(hits as f64 / total as f64)
}

fn train_texture(
    tex: &mut TextureEncoderGenerator,
    data: &Stage3Data,
    cfg: &Stage3Config,
    curves: &mut Curves,
    step: &mut usize,
) -> Result<()> {
    let mut opt = Adam::new(&tex.store, cfg.lr, cfg.betas);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e47);
    let mut critic = Critic::new("texture_d", 3 + NUM_LABELS, cfg.lr, cfg.betas, &mut rng);
    let epochs = cfg.gan_const_epochs + cfg.gan_decay_epochs;
    for epoch in 0..epochs {
        let lr = linear_decay_lr(cfg.lr, epoch as f64, cfg.gan_const_epochs as f64, cfg.gan_decay_epochs as f64);
        opt.lr = lr;
        critic.opt.lr = lr;
        let order = shuffled(data.images.len(), cfg.seed.wrapping_add(200 + epoch as u64));
        for batch in batches(&order, cfg.batch_size) {
            let tape = Tape::new();
            let p = tex.store.bind(&tape, Mode::Train, true, 0);
            let img = tape.constant(gather(&data.images, &batch));
            let m = tape.constant(gather(&data.onehots, &batch));
            let sv = tex.features(&p, img).region_mean(m);
            let out = tex.render(&p, sv, m);
            let fake = concat_channels(&[out, m]);
            let real = concat_channels(&[img, m]);
            let d_loss = critic.update(&real.value(), &fake.value());
            let g_adv = critic.generator_loss(&tape, fake);
            let l1 = out.l1_loss(img);
            let loss = g_adv.add(l1.scale(cfg.lambda_l1));
            check_finite("stage3", *step, "texture_l1", l1.item() as f64)?;
            check_finite("stage3", *step, "texture_d", d_loss)?;
            curves.push(*step, "stage3.texture_d", d_loss);
            curves.push(*step, "stage3.texture_g_adv", g_adv.item() as f64);
            curves.push(*step, "stage3.texture_l1", l1.item() as f64);
            let grads = tape.backward(loss);
            apply_step(&mut tex.store, &mut opt, &p, &grads);
            *step += 1;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_classifier(
    net: &ConvClassifier,
    store: &mut ParamStore,
    inputs: &[Tensor],
    labels: &[u8],
    cfg: &Stage3Config,
    epochs: usize,
    name: &str,
    curves: &mut Curves,
    step: &mut usize,
) -> Result<()> {
    let mut opt = Adam::new(store, cfg.classifier_lr, (0.9, 0.999)).with_weight_decay(cfg.classifier_weight_decay);
    let key = format!("stage3.{name}_ce");
    let salt = name.bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
    for epoch in 0..epochs {
        let order = shuffled(inputs.len(), cfg.seed.wrapping_add(salt).wrapping_add(epoch as u64));
        for batch in batches(&order, cfg.batch_size) {
            let tape = Tape::new();
            let p = store.bind(&tape, Mode::Train, true, 0);
            let z = net.forward(&p, tape.constant(gather(inputs, &batch)));
            let k = z.value().shape()[1];
            let y: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            let ce = losses::cross_entropy_var(z.reshape(&[batch.len(), k, 1, 1]), Arc::new(y))?;
            check_finite("stage3", *step, &key, ce.item() as f64)?;
            curves.push(*step, &key, ce.item() as f64);
            let grads = tape.backward(ce);
            apply_step(store, &mut opt, &p, &grads);
            *step += 1;
        }
    }
    Ok(())
}

/// Fraction of pixels outside `region` whose value differs between `a`
/// and `b` by more than `tol` in any channel.
pub fn changed_fraction_outside(a: &ImageTensor, b: &ImageTensor, layout: &SegmentationMap, region: &[u8], tol: f32) -> f64 {
    let (h, w) = (layout.height(), layout.width());
    let (mut changed, mut total) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if region.contains(&layout.get(y, x)) {
                continue;
            }
            total += 1;
            if a.pixel(y, x).iter().zip(b.pixel(y, x)).any(|(u, v)| (u - v).abs() > tol) {
                changed += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        changed as f64 / total as f64
    }
}

/// Probability helper shared with the service: the learned classifier's
/// score for an image under its region map.
pub fn fashion_score(classifier: &LearnedFashionClassifier, image: &ImageTensor, regions: &SegmentationMap) -> Result<f64> {
    classifier.score(image, regions).map(|s| s.clamp(prob_from_logit(-60.0), prob_from_logit(60.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_synthetic_pair;

    fn toy_cfg() -> Stage3Config {
        Stage3Config {
            vae_const_epochs: 1,
            vae_decay_epochs: 1,
            gan_const_epochs: 1,
            gan_decay_epochs: 0,
            classifier_epochs: 1,
            pattern_epochs: 1,
            batch_size: 2,
            lr: 2e-4,
            betas: (0.5, 0.999),
            classifier_lr: 1e-3,
            classifier_weight_decay: 1e-4,
            beta_kl: 1.0,
            lambda_l1: 10.0,
            seed: 0,
            arch: Stage3Arch::default(),
        }
    }

    fn samples(n: u64) -> Vec<Stage3Sample> {
        (0..n)
            .map(|s| {
                let sp = generate_synthetic_pair(s, 32, 24).unwrap();
                Stage3Sample {
                    image: sp.pair.tryon_gt,
                    parsing: sp.pair.parsing_gt,
                    fashionable: sp.fashionable,
                    pattern: Some(sp.texture.kind),
                }
            })
            .collect()
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_loss(&[0.0], &[0.0]), 0.0);
        assert!((kl_loss(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        assert!((kl_loss(&[0.0], &[4f64.ln()]) - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn texture_gan_loss_matches_scalar_loop() {
        let (real, fake) = ([0.9, 0.6, 0.7], [0.2, 0.4, 0.35]);
        let (g, d) = texture_gan_loss(&real, &fake).unwrap();
        let mut dd = 0.0;
        let mut gg = 0.0;
        for i in 0..3 {
            dd -= real[i].ln() / 3.0 + (1.0 - fake[i]).ln() / 3.0;
            gg -= fake[i].ln() / 3.0;
        }
        assert!((d - dd).abs() < 1e-12 && (g - gg).abs() < 1e-12);
        let (_, d) = texture_gan_loss(&[0.5], &[0.5]).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn eval_encode_is_deterministic() {
        let vae = ShapeVAE::new(8, 32, 24, 1).unwrap();
        let m = BinaryMask::from_fn(32, 24, |y, x| y > 10 && x > 5);
        let a = encode_shape(&vae, &m).unwrap();
        let b = encode_shape(&vae, &m).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0, a.2);
        assert!(encode_shape(&vae, &BinaryMask::full(16, 24)).is_err());
    }

    #[test]
    fn reparameterised_draws_centre_on_mu() {
        let mu = [0.7f32, -1.2];
        let lv = [0.5f32, -0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let mut sums = [0.0f64; 2];
        for _ in 0..n {
            let z = sample_latent(&mu, &lv, &mut rng);
            sums[0] += z[0] as f64;
            sums[1] += z[1] as f64;
        }
        for d in 0..2 {
            let sigma = (0.5 * lv[d] as f64).exp();
            assert!((sums[d] / n as f64 - mu[d] as f64).abs() < 3.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn texture_features_are_region_means() {
        let sp = generate_synthetic_pair(0, 32, 24).unwrap();
        let enc = TextureEncoderGenerator::new(16, 32, 0);
        let sv = encode_texture(&enc, &sp.pair.tryon_gt, &sp.pair.parsing_gt).unwrap();
        assert_eq!(sv.len(), NUM_LABELS);
        let present = sp.pair.parsing_gt.distinct_labels();
        for (l, row) in sv.iter().enumerate() {
            if !present.contains(&(l as u8)) {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
        // Manual averaging of the encoder's feature map.
        let tape = Tape::new();
        let p = enc.store.bind(&tape, Mode::Eval, false, 0);
        let f = enc.features(&p, tape.constant(sp.pair.tryon_gt.to_tensor())).value();
        let torso = label::TORSO_GARMENT;
        let idx: Vec<usize> = (0..32 * 24).filter(|&i| sp.pair.parsing_gt.labels()[i] == torso).collect();
        for c in 0..16 {
            let m: f64 = idx.iter().map(|&i| f.data()[c * 32 * 24 + i] as f64).sum::<f64>() / idx.len() as f64;
            assert!((sv[torso as usize][c] as f64 - m).abs() < 1e-5);
        }
    }

    fn set_param(enc: &mut TextureEncoderGenerator, name: &str, f: impl Fn(&[usize]) -> f32) {
        let id = enc.store.find(name).unwrap();
        let shape = enc.store.get(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for flat in 0..n {
            let mut idx = vec![0; shape.len()];
            let mut r = flat;
            for d in (0..shape.len()).rev() {
                idx[d] = r % shape[d];
                r /= shape[d];
            }
            data.push(f(&idx));
        }
        enc.store.set(id, Tensor::new(&shape, data));
    }

    #[test]
    fn constant_feature_stub_gives_constant_codes() {
        let mut enc = TextureEncoderGenerator::new(16, 32, 0);
        set_param(&mut enc, "texture.enc2.weight", |_| 0.0);
        set_param(&mut enc, "texture.enc2.bias", |i| 0.25 + i[0] as f32);
        let sp = generate_synthetic_pair(1, 32, 24).unwrap();
        let sv = encode_texture(&enc, &sp.pair.tryon_gt, &sp.pair.parsing_gt).unwrap();
        let present = sp.pair.parsing_gt.distinct_labels();
        for (l, row) in sv.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let want = if present.contains(&(l as u8)) { 0.25 + c as f32 } else { 0.0 };
                assert!((v - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_region_hand_computed_means() {
        // Centre-tap identity convolutions: features = RGB in channels 0..3.
        let mut enc = TextureEncoderGenerator::new(16, 32, 0);
        let centre = |i: &[usize]| (i[0] == i[1] && i[0] < 3 && i[2] == 1 && i[3] == 1) as u8 as f32;
        set_param(&mut enc, "texture.enc1.weight", centre);
        set_param(&mut enc, "texture.enc2.weight", centre);
        let image = ImageTensor::new(
            2,
            2,
            3,
            vec![0.1, 0.2, 0.3, 0.5, 0.6, 0.7, 0.9, 0.0, 0.4, 0.3, 0.8, 0.2],
        )
        .unwrap();
        let t = label::TORSO_GARMENT;
        let b = label::BACKGROUND;
        let regions = SegmentationMap::new(2, 2, vec![t, b, t, t], Vocabulary::standard()).unwrap();
        let sv = encode_texture(&enc, &image, &regions).unwrap();
        let torso = [(0.1 + 0.9 + 0.3) / 3.0, (0.2 + 0.0 + 0.8) / 3.0, (0.3 + 0.4 + 0.2) / 3.0];
        let bg = [0.5, 0.6, 0.7];
        for c in 0..16 {
            let (wt, wb) = if c < 3 { (torso[c], bg[c]) } else { (0.0, 0.0) };
            assert!((sv[t as usize][c] - wt).abs() < 1e-6);
            assert!((sv[b as usize][c] - wb).abs() < 1e-6);
        }
        assert!(sv[label::FACE as usize].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn color_preference_rewards_target() {
        let parsing = SegmentationMap::filled(8, 8, label::TORSO_GARMENT);
        let c = ColorPreferenceClassifier::new([1.0, 0.0, 0.0]);
        let red = ImageTensor::new(8, 8, 3, [1.0, 0.0, 0.0].repeat(64)).unwrap();
        let gray = ImageTensor::filled(8, 8, 3, 0.5);
        let s_red = c.score(&red, &parsing).unwrap();
        let s_gray = c.score(&gray, &parsing).unwrap();
        assert!((s_red - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-6);
        assert!(s_gray < s_red);
    }

    struct Opaque;
    impl FashionScorer for Opaque {
        fn id(&self) -> String {
            "opaque".into()
        }
        fn score_var<'t>(&self, _: &'t Tape, _: Var<'t>, _: Var<'t>) -> Option<Var<'t>> {
            None
        }
    }

    fn model_and_code() -> (StyleModel, StyleCode) {
        let model = StyleModel::new(Stage3Arch::default(), 32, 24, 5).unwrap();
        let sp = generate_synthetic_pair(3, 32, 24).unwrap();
        let code = model.encode(&sp.pair.tryon_gt, &sp.pair.parsing_gt).unwrap();
        (model, code)
    }

    fn request(budget: f32) -> EditRequest {
        EditRequest {
            editable_regions: vec!["torso-garment".into()],
            edit_shape: false,
            steps: 8,
            step_size: 0.5,
            budget,
        }
    }

    #[test]
    fn minimal_edit_contract_on_untrained_model() {
        let (model, code) = model_and_code();
        let scorer = ColorPreferenceClassifier::new([0.9, 0.1, 0.1]);
        let out = minimal_edit(&code, &scorer, &model, &request(1.0)).unwrap();
        assert!(out.score_trace.windows(2).all(|w| w[1] > w[0]));
        assert!(out.code_delta_norm <= 1.0 + 1e-5);
        let (_, before) = model.render(&code).unwrap();
        assert_eq!(out.layout, model.decode_layout(&code).unwrap());
        let frac = changed_fraction_outside(&before, &out.styled, &out.layout, &[label::TORSO_GARMENT], 0.0);
        assert_eq!(frac, 0.0);
        assert_eq!(out.code.shape, code.shape);
    }

    #[test]
    fn zero_budget_is_a_no_op() {
        let (model, code) = model_and_code();
        let scorer = ColorPreferenceClassifier::new([0.9, 0.1, 0.1]);
        let out = minimal_edit(&code, &scorer, &model, &request(0.0)).unwrap();
        assert_eq!(out.code, code);
        assert_eq!(out.score_trace.len(), 1);
        assert_eq!(out.styled, model.render(&code).unwrap().1);
    }

    #[test]
    fn anchored_edits_bound_total_displacement() {
        let (model, code) = model_and_code();
        let scorer = ColorPreferenceClassifier::new([0.9, 0.1, 0.1]);
        let mut req = request(0.6);
        req.steps = 3;
        let mut current = code.clone();
        let mut last = f64::NEG_INFINITY;
        for _ in 0..3 {
            let out = minimal_edit_anchored(&current, &code, &scorer, &model, &req).unwrap();
            assert!(out.code_delta_norm <= 0.6 + 1e-5);
            assert!((out.code_delta_norm - out.code.distance(&code)).abs() < 1e-9);
            assert!(*out.score_trace.last().unwrap() >= last);
            last = *out.score_trace.last().unwrap();
            current = out.code;
        }
    }

    #[test]
    fn minimal_edit_errors() {
        let (model, code) = model_and_code();
        assert!(matches!(
            minimal_edit(&code, &Opaque, &model, &request(1.0)),
            Err(VtonError::FailedPrecondition(_))
        ));
        let scorer = ColorPreferenceClassifier::new([0.9, 0.1, 0.1]);
        let mut bad = request(1.0);
        bad.editable_regions = vec!["cape".into()];
        assert!(minimal_edit(&code, &scorer, &model, &bad).is_err());
        let mut short = code.clone();
        short.texture.pop();
        assert!(minimal_edit(&short, &scorer, &model, &request(1.0)).is_err());
    }

    #[test]
    fn shape_editing_stays_within_budget() {
        let (model, code) = model_and_code();
        let scorer = ColorPreferenceClassifier::new([0.1, 0.8, 0.2]);
        let mut req = request(0.7);
        req.edit_shape = true;
        let out = minimal_edit(&code, &scorer, &model, &req).unwrap();
        assert!(out.score_trace.windows(2).all(|w| w[1] > w[0]));
        assert!(out.code_delta_norm <= 0.7 + 1e-5);
    }

    #[test]
    fn smoke_training_is_finite_and_reloads() {
        let data = samples(4);
        let out = train_stage3(&data, &toy_cfg()).unwrap();
        assert!(out.vae_recon_accuracy > 0.0);
        assert!(out.curves.rows().iter().all(|r| r.2.is_finite()));
        let pc = out.pattern_classifier.as_ref().unwrap();
        let probs = pc.class_probabilities(&data[0].image).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut buf = Vec::new();
        out.model.checkpoint(out.steps).write(&mut buf).unwrap();
        let back = StyleModel::from_checkpoint(&Checkpoint::read(&buf[..]).unwrap()).unwrap();
        let code = out.model.encode(&data[1].image, &data[1].parsing).unwrap();
        assert_eq!(code, back.encode(&data[1].image, &data[1].parsing).unwrap());
        let mut buf = Vec::new();
        pc.checkpoint(32, 24).write(&mut buf).unwrap();
        let pc2 = PatternClassifier::from_checkpoint(&Checkpoint::read(&buf[..]).unwrap()).unwrap();
        assert_eq!(probs, pc2.class_probabilities(&data[0].image).unwrap());
    }
}
