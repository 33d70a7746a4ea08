//! Run orchestration: configuration profiles, stage-by-stage training with
//! checkpoints, loss curves and a run manifest, held-out evaluation, and the
//! inference pipeline used by batch inference and the HTTP service.
//!
//! Run directory layout:
//!
//! ```text
//! stage1.ckpt stage2.ckpt stage3.ckpt is_classifier.ckpt
//! curves_stage{1,2,3}.csv stats_stage{1,2,3}.json
//! manifest.json report.json
//! intermediates/<pair id>/...      (with --dump-intermediates)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use vton_tensor::checkpoint::Checkpoint;

use crate::dataset::{pair_dir, read_pair, write_corpus, DatasetPair, LoadedPair};
use crate::error::{invalid, io_err, Result, VtonError};
use crate::eval_metrics::{inception_score, ssim_default, MetricReport};
use crate::image::{BinaryMask, ImageTensor};
use crate::parsing_net::{parsing_forward, train_stage1, ParsingArch, ParsingGenerator, Stage1Config, Stage1Sample};
use crate::person_rep::build_person_representation;
use crate::pix22dsurf::{train_stage2, Stage2Arch, Stage2Config, Stage2Model, Stage2Result, Stage2Sample, Stage2Weights};
use crate::png_io;
use crate::pose::PoseHeatmap;
use crate::segmentation::{label, SegmentationMap};
use crate::style_editor::{train_stage3, PatternClassifier, Stage3Arch, Stage3Config, Stage3Sample, StyleModel};
use crate::synth::{generate_corpus, MIN_SIZE};
use crate::train_util::Curves;

/// Overrides the dataset root of any configuration.
pub const DATA_ENV: &str = "STYLE_VTON_DATA";

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const STAGE3_CKPT: &str = "stage3.ckpt";
pub const IS_CLASSIFIER_CKPT: &str = "is_classifier.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Desk scale: 64×48, epochs ÷ 10, batch 8.
    Toy,
    /// Full scale: 256×192, full epoch counts, batch 16.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = VtonError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "paper" => Ok(Self::Paper),
            _ => Err(invalid(format!("unknown profile '{s}' (expected toy or paper)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

/// Synthetic pairs generated into the dataset root when it holds none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub first_seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub synthetic: Option<SyntheticSpec>,
    /// The last `held_out` pairs (by id) are kept out of training.
    pub held_out: usize,
}

/// Epochs of the six trainables. The VAE and texture GAN keep the learning
/// rate constant for the first part and decay it linearly to zero after.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    pub parsing: usize,
    pub contour: usize,
    pub texture_mapping: usize,
    pub vae_constant: usize,
    pub vae_decay: usize,
    pub gan_constant: usize,
    pub gan_decay: usize,
    pub fashion_classifier: usize,
    /// Classifier behind the Inception Score.
    pub pattern_classifier: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub parsing: f32,
    pub adv: f32,
    pub l1: f32,
    pub recon: f32,
    pub mask_l1: f32,
    pub image_l1: f32,
    pub kl_beta: f32,
    pub texture_l1: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            parsing: 10.0,
            adv: 1.0,
            l1: 1.0,
            recon: 1.0,
            mask_l1: 10.0,
            image_l1: 10.0,
            kl_beta: 1.0,
            texture_l1: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub image: ImageSize,
    pub dataset: DatasetConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub epochs: Epochs,
    pub batch_size: usize,
    pub lr: f32,
    pub betas: (f32, f32),
    pub classifier_lr: f32,
    pub classifier_weight_decay: f32,
    pub weights: LossWeights,
    pub parsing_arch: ParsingArch,
    pub stage2_arch: Stage2Arch,
    pub stage3_arch: Stage3Arch,
    pub is_splits: usize,
}

impl PipelineConfig {
    pub fn profile(profile: Profile) -> Self {
        let full = Epochs {
            parsing: 200,
            contour: 70,
            texture_mapping: 100,
            vae_constant: 100,
            vae_decay: 200,
            gan_constant: 100,
            gan_decay: 100,
            fashion_classifier: 120,
            pattern_classifier: 600,
        };
        let (image, epochs, batch_size, count) = match profile {
            Profile::Toy => {
                let e = Epochs {
                    parsing: full.parsing / 10,
                    contour: full.contour / 10,
                    texture_mapping: full.texture_mapping / 10,
                    vae_constant: full.vae_constant / 10,
                    vae_decay: full.vae_decay / 10,
                    gan_constant: full.gan_constant / 10,
                    gan_decay: full.gan_decay / 10,
                    fashion_classifier: full.fashion_classifier / 10,
                    pattern_classifier: full.pattern_classifier / 10,
                };
                (ImageSize { height: 64, width: 48 }, e, 8, 64)
            }
            Profile::Paper => (ImageSize { height: 256, width: 192 }, full, 16, 2048),
        };
        Self {
            profile,
            image,
            dataset: DatasetConfig {
                root: PathBuf::from("data"),
                synthetic: Some(SyntheticSpec { first_seed: 0, count }),
                held_out: 8,
            },
            output_dir: PathBuf::from("runs/latest"),
            seed: 0,
            epochs,
            batch_size,
            lr: 2e-4,
            betas: (0.5, 0.999),
            classifier_lr: 1e-3,
            classifier_weight_decay: 1e-4,
            weights: LossWeights::default(),
            parsing_arch: ParsingArch::default(),
            stage2_arch: Stage2Arch::default(),
            stage3_arch: Stage3Arch::default(),
            is_splits: 2,
        }
    }

    /// Profile defaults (`profile` key, else `default_profile`) overlaid
    /// with the given JSON object, then validated. Errors name the
    /// offending field.
    pub fn from_json(text: &str, default_profile: Profile) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| invalid(format!("config is not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(invalid("config must be a JSON object"));
        }
        let profile = match user.get("profile") {
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(invalid("config field `profile`: expected \"toy\" or \"paper\"")),
            None => default_profile,
        };
        let mut merged = serde_json::to_value(Self::profile(profile))?;
        merge(&mut merged, user);
        let cfg: Self = serde_path_to_error::deserialize(merged)
            .map_err(|e| invalid(format!("config field `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths in it resolve against the file's
    /// directory; `STYLE_VTON_DATA` replaces the dataset root.
    pub fn load(path: &Path, default_profile: Profile) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_json(&text, default_profile)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.root = base.join(&cfg.dataset.root);
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()) {
            self.dataset.root = PathBuf::from(root);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(invalid(format!("config field `{name}`: {msg}")));
        let ImageSize { height, width } = self.image;
        if height < MIN_SIZE || width < MIN_SIZE || height % 8 != 0 || width % 8 != 0 {
            return field("image", &format!("sides must be multiples of 8 and at least {MIN_SIZE}, got {height}x{width}"));
        }
        let e = &self.epochs;
        for (name, v) in [
            ("parsing", e.parsing),
            ("contour", e.contour),
            ("texture_mapping", e.texture_mapping),
            ("vae_constant", e.vae_constant),
            ("vae_decay", e.vae_decay),
            ("gan_constant", e.gan_constant),
            ("gan_decay", e.gan_decay),
            ("fashion_classifier", e.fashion_classifier),
            ("pattern_classifier", e.pattern_classifier),
        ] {
            if v == 0 {
                return field(&format!("epochs.{name}"), "must be positive");
            }
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be positive");
        }
        for (name, v) in [("lr", self.lr), ("classifier_lr", self.classifier_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return field(name, "must be positive");
            }
        }
        if !(self.classifier_weight_decay >= 0.0 && self.classifier_weight_decay.is_finite()) {
            return field("classifier_weight_decay", "must be non-negative");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return field("betas", "must lie in [0, 1)");
        }
        let w = &self.weights;
        for (name, v) in [
            ("parsing", w.parsing),
            ("adv", w.adv),
            ("l1", w.l1),
            ("recon", w.recon),
            ("mask_l1", w.mask_l1),
            ("image_l1", w.image_l1),
            ("kl_beta", w.kl_beta),
            ("texture_l1", w.texture_l1),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return field(&format!("weights.{name}"), "must be non-negative");
            }
        }
        if let Some(s) = self.dataset.synthetic {
            if s.count == 0 {
                return field("dataset.synthetic.count", "must be positive");
            }
            if self.dataset.held_out >= s.count {
                return field("dataset.held_out", "must leave at least one training pair");
            }
        }
        if self.is_splits == 0 {
            return field("is_splits", "must be positive");
        }
        let a = &self.stage2_arch;
        if a.uv_k < 2 || a.uv_l < 2 {
            return field("stage2_arch", "UV grid needs at least 2x2 texels");
        }
        Ok(())
    }

    /// SHA-256 of the training-relevant configuration (paths excluded), so
    /// the same config run from different directories hashes equally.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset.root = PathBuf::new();
        c.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).unwrap().as_bytes())
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            epochs: self.epochs.parsing,
            batch_size: self.batch_size,
            lr: self.lr,
            betas: self.betas,
            lambda_parsing: self.weights.parsing,
            seed: self.seed,
            arch: self.parsing_arch.clone(),
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            contour_epochs: self.epochs.contour,
            texture_epochs: self.epochs.texture_mapping,
            batch_size: self.batch_size,
            lr: self.lr,
            betas: self.betas,
            weights: Stage2Weights {
                lambda_adv: self.weights.adv as f64,
                lambda_l1: self.weights.l1 as f64,
                lambda_recon: self.weights.recon as f64,
            },
            lambda_mask_l1: self.weights.mask_l1,
            lambda_image_l1: self.weights.image_l1,
            seed: self.seed.wrapping_add(1000),
            arch: self.stage2_arch.clone(),
        }
    }

    pub fn stage3(&self) -> Stage3Config {
        Stage3Config {
            vae_const_epochs: self.epochs.vae_constant,
            vae_decay_epochs: self.epochs.vae_decay,
            gan_const_epochs: self.epochs.gan_constant,
            gan_decay_epochs: self.epochs.gan_decay,
            classifier_epochs: self.epochs.fashion_classifier,
            pattern_epochs: self.epochs.pattern_classifier,
            batch_size: self.batch_size,
            lr: self.lr,
            betas: self.betas,
            classifier_lr: self.classifier_lr,
            classifier_weight_decay: self.classifier_weight_decay,
            beta_kl: self.weights.kl_beta,
            lambda_l1: self.weights.texture_l1,
            seed: self.seed.wrapping_add(2000),
            arch: self.stage3_arch.clone(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Three,
    All,
}

impl std::str::FromStr for Stage {
    type Err = VtonError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "3" => Ok(Self::Three),
            "all" => Ok(Self::All),
            _ => Err(invalid(format!("unknown stage '{s}' (expected 1, 2, 3 or all)"))),
        }
    }
}

pub struct Dataset {
    pub train: Vec<LoadedPair>,
    pub held_out: Vec<LoadedPair>,
}

/// Pair ids under `<root>/pairs`, sorted.
pub fn list_pairs(root: &Path) -> Result<Vec<String>> {
    let pairs = root.join("pairs");
    if !pairs.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids: Vec<String> = fs::read_dir(&pairs)
        .map_err(io_err(&pairs))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    Ok(ids)
}

/// Load the configured dataset, generating the synthetic corpus first when
/// the root holds no pairs.
pub fn prepare_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let root = &cfg.dataset.root;
    if list_pairs(root)?.is_empty() {
        let spec = cfg.dataset.synthetic.ok_or_else(|| {
            VtonError::FailedPrecondition(format!("no pairs found under {}", root.join("pairs").display()))
        })?;
        log::info!("generating {} synthetic pairs into {}", spec.count, root.display());
        let corpus = generate_corpus(spec.first_seed, spec.count, cfg.image.height, cfg.image.width)?;
        write_corpus(root, &corpus)?;
    }
    let mut pairs = Vec::new();
    for id in list_pairs(root)? {
        let (pair, synthetic) = read_pair(&pair_dir(root, &id))?;
        if (pair.height(), pair.width()) != (cfg.image.height, cfg.image.width) {
            return Err(invalid(format!(
                "pair {id} is {}x{}, config expects {}x{}",
                pair.height(),
                pair.width(),
                cfg.image.height,
                cfg.image.width
            )));
        }
        pairs.push(LoadedPair { id, pair, synthetic });
    }
    if pairs.len() <= cfg.dataset.held_out {
        return Err(invalid(format!(
            "dataset has {} pairs, not enough for {} held out",
            pairs.len(),
            cfg.dataset.held_out
        )));
    }
    let held_out = pairs.split_off(pairs.len() - cfg.dataset.held_out);
    Ok(Dataset { train: pairs, held_out })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn require_file(dir: &Path, name: &str, needed_by: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(VtonError::FailedPrecondition(format!(
            "{needed_by} needs {}; train the earlier stage first",
            path.display()
        )))
    }
}

/// Per-stage training facts kept next to the checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_parsing_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon_initial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon_final: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon_drop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vae_recon_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub profile: Profile,
    /// SHA-256 per artifact file name.
    pub artifacts: BTreeMap<String, String>,
    /// SHA-256 of this manifest with this field empty.
    pub manifest_hash: String,
}

impl RunManifest {
    pub fn build(cfg: &PipelineConfig, run_dir: &Path) -> Result<Self> {
        let mut artifacts = BTreeMap::new();
        for name in [STAGE1_CKPT, STAGE2_CKPT, STAGE3_CKPT, IS_CLASSIFIER_CKPT] {
            let path = run_dir.join(name);
            if path.is_file() {
                artifacts.insert(name.to_string(), sha256_hex(&fs::read(&path).map_err(io_err(&path))?));
            }
        }
        let mut m = Self {
            version: format!("vton-core {}", env!("CARGO_PKG_VERSION")),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            profile: cfg.profile,
            artifacts,
            manifest_hash: String::new(),
        };
        m.manifest_hash = m.compute_hash();
        Ok(m)
    }

    fn compute_hash(&self) -> String {
        let mut c = self.clone();
        c.manifest_hash.clear();
        sha256_hex(serde_json::to_string(&c).unwrap().as_bytes())
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let m: Self = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)?;
        if m.manifest_hash != m.compute_hash() {
            return Err(VtonError::FailedPrecondition(format!("{} is corrupt (hash mismatch)", path.display())));
        }
        Ok(m)
    }

    /// Check that each listed artifact still has its recorded hash.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for (name, hash) in &self.artifacts {
            let path = run_dir.join(name);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if &sha256_hex(&bytes) != hash {
                return Err(VtonError::FailedPrecondition(format!(
                    "{} does not match the run manifest",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub held_out: MetricReport,
    pub stage1: StageStats,
    pub stage2: StageStats,
    pub stage3: StageStats,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub dump_intermediates: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub manifest: RunManifest,
    /// Present once all three stages exist.
    pub report: Option<RunReport>,
}

/// Train the requested stage(s) into `cfg.output_dir`. Later stages need
/// the checkpoints of the earlier ones. The manifest is rewritten after
/// every stage; the report once stage 3 is trained.
pub fn train(cfg: &PipelineConfig, stage: Stage, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let run_dir = &cfg.output_dir;
    if matches!(stage, Stage::Two) {
        require_file(run_dir, STAGE1_CKPT, "stage 2")?;
    }
    if matches!(stage, Stage::Three) {
        require_file(run_dir, STAGE1_CKPT, "stage 3")?;
        require_file(run_dir, STAGE2_CKPT, "stage 3")?;
    }
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let data = prepare_dataset(cfg)?;
    let all = matches!(stage, Stage::All);
    if all || stage == Stage::One {
        run_stage1(cfg, &data)?;
    }
    if all || stage == Stage::Two {
        run_stage2(cfg, &data)?;
    }
    if all || stage == Stage::Three {
        run_stage3(cfg, &data)?;
    }
    let manifest = RunManifest::build(cfg, run_dir)?;
    write_bytes(&run_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    let report = if run_dir.join(STAGE3_CKPT).is_file() {
        let pipeline = Pipeline::load(run_dir)?;
        let dump = opts.dump_intermediates.then(|| run_dir.join("intermediates"));
        let held_out = evaluate(&pipeline, &data.held_out, None, dump.as_deref(), cfg.is_splits)?;
        let stats = |n: u8| -> Result<StageStats> {
            let path = run_dir.join(format!("stats_stage{n}.json"));
            Ok(serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)?)
        };
        let report = RunReport {
            config_hash: cfg.hash(),
            held_out,
            stage1: stats(1)?,
            stage2: stats(2)?,
            stage3: stats(3)?,
        };
        write_bytes(&run_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
        Some(report)
    } else {
        None
    };
    Ok(TrainSummary { manifest, report })
}

fn finish_stage(run_dir: &Path, n: u8, ckpt: (&str, Checkpoint), curves: &Curves, stats: &StageStats) -> Result<()> {
    ckpt.1.save(run_dir.join(ckpt.0))?;
    write_bytes(&run_dir.join(format!("curves_stage{n}.csv")), curves.to_csv().as_bytes())?;
    write_bytes(
        &run_dir.join(format!("stats_stage{n}.json")),
        serde_json::to_string_pretty(stats)?.as_bytes(),
    )
}

fn run_stage1(cfg: &PipelineConfig, data: &Dataset) -> Result<()> {
    let t = Instant::now();
    let mut samples = Vec::with_capacity(data.train.len());
    for lp in &data.train {
        let p = &lp.pair;
        let rep = build_person_representation(&p.person, &p.parsing_gt, &p.pose)?;
        samples.push(Stage1Sample::new(&rep, &p.garment, &p.parsing_gt)?);
    }
    let out = train_stage1(&samples, &cfg.stage1())?;
    let mut acc = 0.0;
    for lp in &data.train {
        acc += predicted_parsing(&out.generator, &lp.pair)?.pixel_accuracy(&lp.pair.parsing_gt)?;
    }
    let stats = StageStats {
        steps: out.steps,
        train_parsing_accuracy: Some(acc / data.train.len() as f64),
        ..Default::default()
    };
    let ckpt = out.generator.checkpoint(out.steps, cfg.image.height, cfg.image.width);
    finish_stage(&cfg.output_dir, 1, (STAGE1_CKPT, ckpt), &out.curves, &stats)?;
    log::info!("stage 1: {} steps in {:.1}s", out.steps, t.elapsed().as_secs_f64());
    Ok(())
}

fn predicted_parsing(gen: &ParsingGenerator, pair: &DatasetPair) -> Result<SegmentationMap> {
    let rep = build_person_representation(&pair.person, &pair.parsing_gt, &pair.pose)?;
    Ok(parsing_forward(gen, &rep, &pair.garment)?.0)
}

fn run_stage2(cfg: &PipelineConfig, data: &Dataset) -> Result<()> {
    let t = Instant::now();
    let gen = ParsingGenerator::from_checkpoint(&Checkpoint::load(cfg.output_dir.join(STAGE1_CKPT))?)?;
    let grid = (cfg.stage2_arch.uv_k, cfg.stage2_arch.uv_l);
    let mut samples = Vec::with_capacity(data.train.len());
    for lp in &data.train {
        let p = &lp.pair;
        let rep = build_person_representation(&p.person, &p.parsing_gt, &p.pose)?;
        let parsing = parsing_forward(&gen, &rep, &p.garment)?.0;
        let warp = lp.synthetic.as_ref().map(|m| &m.warp);
        samples.push(Stage2Sample::new(p, &parsing, &rep.identity_image, warp, grid)?);
    }
    let out = train_stage2(&samples, &cfg.stage2())?;
    let stats = StageStats {
        steps: out.steps,
        recon_initial: Some(out.recon_initial),
        recon_final: Some(out.recon_final),
        recon_drop: Some(1.0 - out.recon_final / out.recon_initial),
        ..Default::default()
    };
    let ckpt = out.model.checkpoint(out.steps, cfg.image.height, cfg.image.width);
    finish_stage(&cfg.output_dir, 2, (STAGE2_CKPT, ckpt), &out.curves, &stats)?;
    log::info!("stage 2: {} steps in {:.1}s", out.steps, t.elapsed().as_secs_f64());
    Ok(())
}

/// Fashionability label for pairs without generator metadata: mean HSV
/// saturation of the try-on torso region at least 0.45.
pub fn saturation_label(image: &ImageTensor, parsing: &SegmentationMap) -> bool {
    let torso = parsing.mask_of(label::TORSO_GARMENT);
    let (mut sum, mut n) = (0.0f64, 0usize);
    for y in 0..image.height() {
        for x in 0..image.width() {
            if torso.get(y, x) {
                let px = image.pixel(y, x);
                let max = px.iter().cloned().fold(0.0f32, f32::max);
                let min = px.iter().cloned().fold(1.0f32, f32::min);
                sum += if max > 0.0 { ((max - min) / max) as f64 } else { 0.0 };
                n += 1;
            }
        }
    }
    n > 0 && sum / n as f64 >= 0.45
}

fn run_stage3(cfg: &PipelineConfig, data: &Dataset) -> Result<()> {
    let t = Instant::now();
    let samples: Vec<Stage3Sample> = data
        .train
        .iter()
        .map(|lp| Stage3Sample {
            image: lp.pair.tryon_gt.clone(),
            parsing: lp.pair.parsing_gt.clone(),
            fashionable: match &lp.synthetic {
                Some(m) => m.fashionable,
                None => saturation_label(&lp.pair.tryon_gt, &lp.pair.parsing_gt),
            },
            pattern: lp.synthetic.as_ref().map(|m| m.texture.kind),
        })
        .collect();
    let out = train_stage3(&samples, &cfg.stage3())?;
    let stats = StageStats {
        steps: out.steps,
        vae_recon_accuracy: Some(out.vae_recon_accuracy),
        ..Default::default()
    };
    let is_path = cfg.output_dir.join(IS_CLASSIFIER_CKPT);
    match &out.pattern_classifier {
        Some(pc) => pc.checkpoint(cfg.image.height, cfg.image.width).save(&is_path)?,
        None if is_path.exists() => fs::remove_file(&is_path).map_err(io_err(&is_path))?,
        None => {}
    }
    finish_stage(&cfg.output_dir, 3, (STAGE3_CKPT, out.model.checkpoint(out.steps)), &out.curves, &stats)?;
    log::info!("stage 3: {} steps in {:.1}s", out.steps, t.elapsed().as_secs_f64());
    Ok(())
}

/// Loaded, immutable models of a finished run.
pub struct Pipeline {
    pub parsing: ParsingGenerator,
    pub stage2: Stage2Model,
    pub style: StyleModel,
    pub pattern: Option<PatternClassifier>,
    pub manifest: RunManifest,
    pub size: (usize, usize),
}

/// Outputs of one try-on.
#[derive(Clone, Debug)]
pub struct TryonOutput {
    /// Stage-1 target parsing.
    pub parsing: SegmentationMap,
    pub stage2: Stage2Result,
}

impl Pipeline {
    /// Load all checkpoints of a run, verifying them against its manifest.
    pub fn load(run_dir: &Path) -> Result<Self> {
        let manifest = RunManifest::load(run_dir)?;
        manifest.verify(run_dir)?;
        for name in [STAGE1_CKPT, STAGE2_CKPT, STAGE3_CKPT] {
            if !manifest.artifacts.contains_key(name) {
                return Err(VtonError::FailedPrecondition(format!(
                    "run {} lacks {name}; train all three stages first",
                    run_dir.display()
                )));
            }
        }
        let ckpt1 = Checkpoint::load(run_dir.join(STAGE1_CKPT))?;
        let size = (
            ckpt1.meta["height"].as_u64().unwrap_or(0) as usize,
            ckpt1.meta["width"].as_u64().unwrap_or(0) as usize,
        );
        let pattern = if manifest.artifacts.contains_key(IS_CLASSIFIER_CKPT) {
            Some(PatternClassifier::from_checkpoint(&Checkpoint::load(run_dir.join(IS_CLASSIFIER_CKPT))?)?)
        } else {
            None
        };
        Ok(Self {
            parsing: ParsingGenerator::from_checkpoint(&ckpt1)?,
            stage2: Stage2Model::from_checkpoint(&Checkpoint::load(run_dir.join(STAGE2_CKPT))?)?,
            style: StyleModel::from_checkpoint(&Checkpoint::load(run_dir.join(STAGE3_CKPT))?)?,
            pattern,
            manifest,
            size,
        })
    }

    /// Stages 1 and 2 for a person (with its parsing and pose) and a garment.
    pub fn tryon(
        &self,
        person: &ImageTensor,
        person_parsing: &SegmentationMap,
        pose: &PoseHeatmap,
        garment: &ImageTensor,
        garment_mask: &BinaryMask,
    ) -> Result<TryonOutput> {
        let (h, w) = self.size;
        if !person.same_size(h, w) || !garment.same_size(h, w) {
            return Err(invalid(format!("inputs must be {h}x{w}, the size the models were trained at")));
        }
        let rep = build_person_representation(person, person_parsing, pose)?;
        let (parsing, _) = parsing_forward(&self.parsing, &rep, garment)?;
        let stage2 = self.stage2.run(garment, garment_mask, pose, &parsing, &rep.identity_image)?;
        Ok(TryonOutput { parsing, stage2 })
    }

    pub fn tryon_pair(&self, pair: &DatasetPair) -> Result<TryonOutput> {
        self.tryon(&pair.person, &pair.parsing_gt, &pair.pose, &pair.garment, &pair.garment_mask)
    }
}

fn dump_intermediates(dir: &Path, out: &TryonOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let s2 = &out.stage2;
    write_bytes(&dir.join("parsing.png"), &png_io::encode_parsing(&out.parsing)?)?;
    write_bytes(&dir.join("warped_mask.png"), &png_io::encode_mask(&s2.warped_mask)?)?;
    write_bytes(&dir.join("warped_garment.png"), &png_io::encode_image(&s2.warped_garment)?)?;
    write_bytes(&dir.join("tryon.png"), &png_io::encode_image(&s2.tryon)?)?;
    let mut uv = Vec::new();
    s2.correspondence.write(&mut uv)?;
    write_bytes(&dir.join("correspondence.uv"), &uv)
}

/// Run the pipeline over `pairs`, optionally writing each try-on to
/// `<out_dir>/<id>.png` and intermediates to `<dump>/<id>/`, and score the
/// results against the ground truth.
pub fn evaluate(
    pipeline: &Pipeline,
    pairs: &[LoadedPair],
    out_dir: Option<&Path>,
    dump: Option<&Path>,
    is_splits: usize,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(invalid("no pairs found"));
    }
    let mut ssim_sum = 0.0;
    let mut images = Vec::with_capacity(pairs.len());
    for lp in pairs {
        let out = pipeline.tryon_pair(&lp.pair)?;
        ssim_sum += ssim_default(&out.stage2.tryon, &lp.pair.tryon_gt)?;
        if let Some(dir) = out_dir {
            write_bytes(&dir.join(format!("{}.png", lp.id)), &png_io::encode_image(&out.stage2.tryon)?)?;
        }
        if let Some(dir) = dump {
            dump_intermediates(&dir.join(&lp.id), &out)?;
        }
        images.push(out.stage2.tryon);
    }
    let (is_mean, is_std, classifier_id) = match &pipeline.pattern {
        Some(pc) if images.len() >= is_splits => {
            let (m, s) = inception_score(&images, pc, is_splits)?;
            (Some(m), Some(s), Some(crate::eval_metrics::ImageClassifier::id(pc)))
        }
        _ => (None, None, None),
    };
    Ok(MetricReport {
        ssim_mean: ssim_sum / pairs.len() as f64,
        is_mean,
        is_std,
        n_images: pairs.len(),
        classifier_id,
    })
}

/// Try-on for every pair under `<pairs_root>/pairs`, written to
/// `<out_dir>/<id>.png`, plus `<out_dir>/report.json`. Unreadable pairs are
/// skipped with a warning; more than half skipped is an error.
pub fn batch_infer(
    pipeline: &Pipeline,
    pairs_root: &Path,
    out_dir: &Path,
    dump_intermediates: bool,
    is_splits: usize,
) -> Result<MetricReport> {
    let ids = list_pairs(pairs_root)?;
    if ids.is_empty() {
        return Err(VtonError::FailedPrecondition(format!(
            "no pairs found under {}",
            pairs_root.join("pairs").display()
        )));
    }
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for id in &ids {
        match read_pair(&pair_dir(pairs_root, id)) {
            Ok((pair, synthetic)) => pairs.push(LoadedPair {
                id: id.clone(),
                pair,
                synthetic,
            }),
            Err(e) => {
                log::warn!("skipping pair {id}: {e}");
                skipped += 1;
            }
        }
    }
    if 2 * skipped > ids.len() {
        return Err(VtonError::FailedPrecondition(format!(
            "{skipped} of {} pairs unreadable",
            ids.len()
        )));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let dump = dump_intermediates.then(|| out_dir.join("intermediates"));
    let report = evaluate(pipeline, &pairs, Some(out_dir), dump.as_deref(), is_splits.min(pairs.len()))?;
    write_bytes(&out_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

/// Score predicted try-ons `<pred>/<id>.png` against `<gt>/<id>.png`, or
/// `<gt>/pairs/<id>/person.png` for a dataset root. IS is computed when a
/// classifier is given.
pub fn evaluate_dirs(pred: &Path, gt: &Path, classifier: Option<&PatternClassifier>, splits: usize) -> Result<MetricReport> {
    let mut ids: Vec<String> = fs::read_dir(pred)
        .map_err(io_err(pred))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "png"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(invalid(format!("no predictions found in {}", pred.display())));
    }
    let mut ssim_sum = 0.0;
    let mut images = Vec::with_capacity(ids.len());
    for id in &ids {
        let flat = gt.join(format!("{id}.png"));
        let gt_path = if flat.is_file() { flat } else { pair_dir(gt, id).join("person.png") };
        let p_path = pred.join(format!("{id}.png"));
        let p = png_io::decode_rgb(&fs::read(&p_path).map_err(io_err(&p_path))?)?;
        let g = png_io::decode_rgb(&fs::read(&gt_path).map_err(io_err(&gt_path))?)?;
        ssim_sum += ssim_default(&p, &g)?;
        images.push(p);
    }
    let (is_mean, is_std, classifier_id) = match classifier {
        Some(c) => {
            let (m, s) = inception_score(&images, c, splits)?;
            (Some(m), Some(s), Some(crate::eval_metrics::ImageClassifier::id(c)))
        }
        None => (None, None, None),
    };
    Ok(MetricReport {
        ssim_mean: ssim_sum / ids.len() as f64,
        is_mean,
        is_std,
        n_images: ids.len(),
        classifier_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_profile_divides_full_epochs_by_ten() {
        let toy = PipelineConfig::profile(Profile::Toy);
        let paper = PipelineConfig::profile(Profile::Paper);
        let (t, p) = (&toy.epochs, &paper.epochs);
        assert_eq!(
            [p.parsing, p.contour, p.texture_mapping, p.vae_constant + p.vae_decay, p.gan_constant + p.gan_decay, p.fashion_classifier],
            [200, 70, 100, 300, 200, 120]
        );
        assert_eq!([t.parsing, t.contour, t.texture_mapping, t.fashion_classifier], [20, 7, 10, 12]);
        assert_eq!((toy.image.height, toy.image.width, toy.batch_size), (64, 48, 8));
        assert_eq!((paper.image.height, paper.image.width, paper.batch_size), (256, 192, 16));
        assert_eq!(toy.lr, 2e-4);
        toy.validate().unwrap();
        paper.validate().unwrap();
    }

    #[test]
    fn overrides_merge_into_profile() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 7, "epochs": {"parsing": 3}}"#, Profile::Toy).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs.parsing, 3);
        assert_eq!(cfg.epochs.contour, 7);
        let paper = PipelineConfig::from_json(r#"{"profile": "paper"}"#, Profile::Toy).unwrap();
        assert_eq!(paper.image.height, 256);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let err = |text: &str| PipelineConfig::from_json(text, Profile::Toy).unwrap_err().to_string();
        assert!(err(r#"{"epochs": {"parsing": 0}}"#).contains("epochs.parsing"));
        assert!(err(r#"{"epochs": {"parsing": "many"}}"#).contains("epochs.parsing"));
        assert!(err(r#"{"image": {"height": 60, "width": 48}}"#).contains("image"));
        assert!(err(r#"{"weights": {"bogus": 1}}"#).contains("weights"));
        assert!(err(r#"{"betas": [1.5, 0.9]}"#).contains("betas"));
        assert!(err(r#"{"profile": "huge"}"#).contains("huge"));
        assert!(err("[1]").contains("object"));
    }

    #[test]
    fn config_hash_ignores_paths() {
        let a = PipelineConfig::profile(Profile::Toy);
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        b.dataset.root = PathBuf::from("/data2");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn later_stage_without_checkpoint_is_failed_precondition() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::profile(Profile::Toy);
        cfg.output_dir = dir.path().join("run");
        cfg.dataset.root = dir.path().join("data");
        match train(&cfg, Stage::Two, &TrainOptions::default()) {
            Err(VtonError::FailedPrecondition(msg)) => assert!(msg.contains(STAGE1_CKPT), "{msg}"),
            other => panic!("expected failed precondition, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn saturation_label_splits_grey_and_vivid() {
        let parsing = SegmentationMap::filled(4, 4, label::TORSO_GARMENT);
        let grey = ImageTensor::filled(4, 4, 3, 0.6);
        let vivid = ImageTensor::new(4, 4, 3, [0.9, 0.1, 0.2].repeat(16)).unwrap();
        assert!(!saturation_label(&grey, &parsing));
        assert!(saturation_label(&vivid, &parsing));
    }
}
