//! Stage 1: a conditional GAN that predicts the target body parsing from the
//! fused person representation, the garment image and the pose.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use vton_tensor::checkpoint::Checkpoint;
use vton_tensor::nn::{BatchNorm2d, Bound, Conv2d, Dropout, Mode, ParamStore};
use vton_tensor::optim::Adam;
use vton_tensor::{concat_channels, Tape, Tensor, Var};

use crate::error::{invalid, Result, VtonError};
use crate::image::ImageTensor;
use crate::losses;
use crate::nets::Critic;
use crate::person_rep::PersonRepresentation;
use crate::pose::NUM_KEYPOINTS;
use crate::segmentation::{SegmentationMap, Vocabulary, NUM_LABELS};
use crate::train_util::{apply_step, batches, check_finite, gather, shuffled, Curves};

/// Fuzzy parsing one-hot, garment RGB and pose heatmaps.
pub const INPUT_CHANNELS: usize = NUM_LABELS + 3 + NUM_KEYPOINTS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsingArch {
    pub growth: usize,
    pub layers_per_block: usize,
    pub dropout: f32,
    pub width: usize,
}

impl Default for ParsingArch {
    fn default() -> Self {
        Self {
            growth: 12,
            layers_per_block: 3,
            dropout: 0.1,
            width: 24,
        }
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    norm: BatchNorm2d,
    conv: Conv2d,
}

#[derive(Clone, Debug)]
struct DenseBlock {
    layers: Vec<DenseLayer>,
    dropout: Dropout,
}

impl DenseBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, arch: &ParsingArch, rng: &mut ChaCha8Rng) -> (Self, usize) {
        let mut layers = Vec::new();
        let mut c = cin;
        for i in 0..arch.layers_per_block {
            layers.push(DenseLayer {
                norm: BatchNorm2d::new(store, &format!("{name}.{i}.bn"), c),
                conv: Conv2d::new(store, &format!("{name}.{i}.conv"), c, arch.growth, 3, 1, rng),
            });
            c += arch.growth;
        }
        (
            Self {
                layers,
                dropout: Dropout(arch.dropout),
            },
            c,
        )
    }

    /// BN → ReLU → 3×3 conv → dropout, each output appended to the input.
    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for layer in &self.layers {
            let new = layer.conv.forward(p, layer.norm.forward(p, h).relu());
            h = concat_channels(&[h, self.dropout.forward(p, new)]);
        }
        h
    }
}

#[derive(Clone, Debug)]
struct Transition {
    norm: BatchNorm2d,
    conv: Conv2d,
}

impl Transition {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: BatchNorm2d::new(store, &format!("{name}.bn"), cin),
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 1, 1, rng),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        self.conv.forward(p, self.norm.forward(p, x).relu())
    }
}

#[derive(Clone, Debug)]
struct DenseNet {
    stem: Conv2d,
    down_norm: BatchNorm2d,
    down: Conv2d,
    block_a: DenseBlock,
    trans_a: Transition,
    block_b: DenseBlock,
    trans_b: Transition,
    block_c: DenseBlock,
    trans_c: Transition,
    head: Conv2d,
    out: Conv2d,
}

impl DenseNet {
    fn new(store: &mut ParamStore, arch: &ParsingArch, rng: &mut ChaCha8Rng) -> Self {
        let w = arch.width;
        let mid = 32;
        let stem = Conv2d::new(store, "g.stem", INPUT_CHANNELS, w, 3, 1, rng);
        let down_norm = BatchNorm2d::new(store, "g.down.bn", w);
        let down = Conv2d::new(store, "g.down.conv", w, w, 3, 2, rng);
        let (block_a, ca) = DenseBlock::new(store, "g.block_a", w, arch, rng);
        let trans_a = Transition::new(store, "g.trans_a", ca, mid, rng);
        let (block_b, cb) = DenseBlock::new(store, "g.block_b", mid, arch, rng);
        let trans_b = Transition::new(store, "g.trans_b", cb, mid, rng);
        let (block_c, cc) = DenseBlock::new(store, "g.block_c", 2 * mid, arch, rng);
        let trans_c = Transition::new(store, "g.trans_c", cc, mid, rng);
        let head = Conv2d::new(store, "g.head", mid + w, 16, 3, 1, rng);
        let out = Conv2d::with_options(store, "g.out", 16, NUM_LABELS, 1, 1, 0, true, 0.5, rng);
        Self {
            stem,
            down_norm,
            down,
            block_a,
            trans_a,
            block_b,
            trans_b,
            block_c,
            trans_c,
            head,
            out,
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let stem = self.stem.forward(p, x);
        let d = self.down.forward(p, self.down_norm.forward(p, stem).relu());
        let a = self.trans_a.forward(p, self.block_a.forward(p, d));
        let b = self.trans_b.forward(p, self.block_b.forward(p, a.avg_pool2x2()));
        let c = concat_channels(&[b.upsample2x(), a]);
        let c = self.trans_c.forward(p, self.block_c.forward(p, c));
        let h = concat_channels(&[c.upsample2x(), stem]);
        let h = self.head.forward(p, h).relu();
        self.out.forward(p, h)
    }
}

/// Dense-block encoder–decoder mapping the stage-1 input to label logits.
#[derive(Clone, Debug)]
pub struct ParsingGenerator {
    arch: ParsingArch,
    net: DenseNet,
    store: ParamStore,
    vocabulary: Vocabulary,
}

impl ParsingGenerator {
    pub fn new(arch: ParsingArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, &arch, &mut rng);
        Self {
            arch,
            net,
            store,
            vocabulary: Vocabulary::standard(),
        }
    }

    pub fn arch(&self) -> &ParsingArch {
        &self.arch
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: Mode, track: bool, seed: u64) -> (Var<'t>, Bound<'t>) {
        let p = self.store.bind(tape, mode, track, seed);
        (self.net.forward(&p, x), p)
    }

    /// Eval-mode logits `[N, L, H, W]` for a stacked input batch.
    pub fn logits(&self, input: &Tensor) -> Tensor {
        let tape = Tape::new();
        let (out, _) = self.forward(&tape, tape.constant(input.clone()), Mode::Eval, false, 0);
        (*out.value()).clone()
    }

    pub fn checkpoint(&self, step: usize, height: usize, width: usize) -> Checkpoint {
        let meta = json!({
            "stage": 1,
            "arch": self.arch,
            "vocabulary": self.vocabulary.names(),
            "step": step,
            "height": height,
            "width": width,
        });
        Checkpoint::from_stores(meta, &[("parsing", &self.store)])
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("stage").and_then(|v| v.as_u64()) != Some(1) {
            return Err(VtonError::FailedPrecondition("checkpoint is not a stage-1 checkpoint".into()));
        }
        let arch: ParsingArch = serde_json::from_value(ckpt.meta["arch"].clone())?;
        let mut g = Self::new(arch, 0);
        ckpt.restore("parsing", &mut g.store)?;
        Ok(g)
    }
}

/// `[1, INPUT_CHANNELS, H, W]` stage-1 input.
pub fn stage1_input(rep: &PersonRepresentation, garment: &ImageTensor) -> Result<Tensor> {
    let (h, w) = (rep.fuzzy_parsing.height(), rep.fuzzy_parsing.width());
    if !garment.same_size(h, w) || garment.channels() != 3 || rep.pose.height() != h || rep.pose.width() != w {
        return Err(invalid(format!(
            "stage-1 inputs must share {h}x{w}; garment is {}x{}x{}, pose {}x{}",
            garment.height(),
            garment.width(),
            garment.channels(),
            rep.pose.height(),
            rep.pose.width()
        )));
    }
    if rep.pose.num_keypoints() != NUM_KEYPOINTS || rep.fuzzy_parsing.vocabulary().len() != NUM_LABELS {
        return Err(invalid("stage 1 expects the standard label and keypoint sets"));
    }
    let tape = Tape::new();
    let x = concat_channels(&[
        tape.constant(rep.fuzzy_parsing.to_one_hot()),
        tape.constant(garment.to_tensor()),
        tape.constant(rep.pose.to_tensor()),
    ]);
    Ok((*x.value()).clone())
}

/// Predicted target parsing (argmax) and its logits `[1, L, H, W]`.
pub fn parsing_forward(
    gen: &ParsingGenerator,
    rep: &PersonRepresentation,
    garment: &ImageTensor,
) -> Result<(SegmentationMap, Tensor)> {
    let input = stage1_input(rep, garment)?;
    let logits = gen.logits(&input);
    let map = SegmentationMap::from_logits(&logits, 0, gen.vocabulary.clone())?;
    Ok((map, logits))
}

/// Non-saturating stage-1 GAN losses from discriminator probabilities.
/// Returns `(gen_loss, disc_loss)`.
pub fn adv_loss_stage1(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    losses::gan_loss(d_real, d_fake)
}

/// Mean per-pixel cross-entropy of `[N, L, H, W]` logits against `target`
/// (one map per sample, in order).
pub fn parsing_pixel_loss(logits: &Tensor, target: &[SegmentationMap]) -> Result<f64> {
    let (labels, dims) = pixel_loss_inputs(logits, target)?;
    let x: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    losses::cross_entropy(&x, dims, &labels)
}

fn pixel_loss_inputs(logits: &Tensor, target: &[SegmentationMap]) -> Result<(Vec<u8>, losses::Dims4)> {
    if logits.shape().len() != 4 {
        return Err(invalid(format!("logits must be [N, L, H, W], got {:?}", logits.shape())));
    }
    let dims = logits.dims4();
    let (n, l, h, w) = dims;
    if target.len() != n {
        return Err(invalid(format!("{n} logit samples but {} targets", target.len())));
    }
    let mut labels = Vec::with_capacity(n * h * w);
    for t in target {
        if t.height() != h || t.width() != w {
            return Err(invalid("target parsing size differs from logits"));
        }
        if t.vocabulary().len() != l {
            return Err(invalid(format!("target vocabulary has {} labels, logits {l}", t.vocabulary().len())));
        }
        labels.extend_from_slice(t.labels());
    }
    Ok((labels, dims))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub betas: (f32, f32),
    pub lambda_parsing: f32,
    pub seed: u64,
    pub arch: ParsingArch,
}

/// One training example: the stacked stage-1 input and its target parsing.
#[derive(Clone, Debug)]
pub struct Stage1Sample {
    pub input: Tensor,
    pub target: SegmentationMap,
}

impl Stage1Sample {
    pub fn new(rep: &PersonRepresentation, garment: &ImageTensor, target: &SegmentationMap) -> Result<Self> {
        Ok(Self {
            input: stage1_input(rep, garment)?,
            target: target.clone(),
        })
    }
}

pub struct Stage1Outcome {
    pub generator: ParsingGenerator,
    pub curves: Curves,
    pub steps: usize,
}

/// Alternating discriminator / generator updates. Each step the critic sees
/// the current fake first, then the generator is scored by the updated
/// critic: `L = bce(D(fake), 1) + λ_p · CE`.
pub fn train_stage1(samples: &[Stage1Sample], cfg: &Stage1Config) -> Result<Stage1Outcome> {
    if samples.is_empty() {
        return Err(invalid("stage 1 needs a non-empty dataset"));
    }
    let mut gen = ParsingGenerator::new(cfg.arch.clone(), cfg.seed);
    let mut g_opt = Adam::new(&gen.store, cfg.lr, cfg.betas);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd15c);
    let mut critic = Critic::new("parsing_d", NUM_LABELS + INPUT_CHANNELS, cfg.lr, cfg.betas, &mut rng);
    let inputs: Vec<Tensor> = samples.iter().map(|s| s.input.clone()).collect();
    let onehots: Vec<Tensor> = samples.iter().map(|s| s.target.to_one_hot()).collect();
    let mut curves = Curves::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled(samples.len(), cfg.seed.wrapping_add(epoch as u64));
        for batch in batches(&order, cfg.batch_size) {
            let x = gather(&inputs, &batch);
            let real_parsing = gather(&onehots, &batch);
            let labels: Vec<u8> = batch.iter().flat_map(|&i| samples[i].target.labels().iter().copied()).collect();

            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (logits, bound) = gen.forward(&tape, xv, Mode::Train, true, cfg.seed.wrapping_mul(31).wrapping_add(step as u64));
            let fake = concat_channels(&[logits.softmax_channels(), xv]);
            let real = concat_channels(&[tape.constant(real_parsing), xv]);

            let d_loss = critic.update(&real.value(), &fake.value());
            let g_adv = critic.generator_loss(&tape, fake);
            let ce = losses::cross_entropy_var(logits, Arc::new(labels))?;
            let total = g_adv.add(ce.scale(cfg.lambda_parsing));

            check_finite("stage1", step, "parsing", ce.item() as f64)?;
            check_finite("stage1", step, "d", d_loss)?;
            curves.push(step, "stage1.d", d_loss);
            curves.push(step, "stage1.g_adv", g_adv.item() as f64);
            curves.push(step, "stage1.parsing", ce.item() as f64);

            let grads = tape.backward(total);
            apply_step(&mut gen.store, &mut g_opt, &bound, &grads);
            step += 1;
        }
    }
    Ok(Stage1Outcome {
        generator: gen,
        curves,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::person_rep::build_person_representation;
    use crate::synth::generate_synthetic_pair;

    fn sample(seed: u64) -> (PersonRepresentation, ImageTensor, SegmentationMap) {
        let p = generate_synthetic_pair(seed, 32, 24).unwrap().pair;
        let rep = build_person_representation(&p.person, &p.parsing_gt, &p.pose).unwrap();
        (rep, p.garment, p.parsing_gt)
    }

    #[test]
    fn forward_shape_and_determinism() {
        let g = ParsingGenerator::new(ParsingArch::default(), 3);
        let (rep, garment, _) = sample(1);
        let (map, logits) = parsing_forward(&g, &rep, &garment).unwrap();
        assert_eq!(logits.shape(), &[1, NUM_LABELS, 32, 24]);
        assert_eq!((map.height(), map.width()), (32, 24));
        let (_, again) = parsing_forward(&g, &rep, &garment).unwrap();
        assert_eq!(logits, again);
    }

    #[test]
    fn pixel_loss_rejects_bad_targets() {
        let logits = Tensor::zeros(&[1, NUM_LABELS, 2, 2]);
        let ok = SegmentationMap::filled(2, 2, 0);
        assert!((parsing_pixel_loss(&logits, &[ok.clone()]).unwrap() - 8f64.ln()).abs() < 1e-9);
        assert!(parsing_pixel_loss(&logits, &[ok.clone(), ok]).is_err());
    }

    #[test]
    fn smoke_training_is_finite_and_reloads() {
        let samples: Vec<Stage1Sample> = (0..8)
            .map(|s| {
                let (rep, garment, target) = sample(s);
                Stage1Sample::new(&rep, &garment, &target).unwrap()
            })
            .collect();
        let cfg = Stage1Config {
            epochs: 1,
            batch_size: 4,
            lr: 2e-4,
            betas: (0.5, 0.999),
            lambda_parsing: 10.0,
            seed: 5,
            arch: ParsingArch::default(),
        };
        let out = train_stage1(&samples, &cfg).unwrap();
        assert_eq!(out.steps, 2);
        assert!(out.curves.rows().iter().all(|r| r.2.is_finite()));
        let mut buf = Vec::new();
        out.generator.checkpoint(out.steps, 32, 24).write(&mut buf).unwrap();
        let back = ParsingGenerator::from_checkpoint(&Checkpoint::read(&buf[..]).unwrap()).unwrap();
        assert_eq!(back.logits(&samples[0].input), out.generator.logits(&samples[0].input));
    }
}
