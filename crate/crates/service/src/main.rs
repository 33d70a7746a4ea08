use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vton_core::dataset::write_corpus;
use vton_core::eval_metrics::{ab_aggregate, format_ab_table, ABStudy};
use vton_core::harness::{
    batch_infer, evaluate_dirs, train, Pipeline, PipelineConfig, Profile, Stage, TrainOptions,
};
use vton_core::style_editor::PatternClassifier;
use vton_core::synth::generate_corpus;
use vton_service::{router, AppState, Catalog};
use vton_tensor::checkpoint::Checkpoint;

#[derive(Parser)]
#[command(name = "style-vton", version, about = "Three-stage virtual try-on: train, evaluate, serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config; omitted fields take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    profile: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let profile: Profile = self.profile.parse()?;
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path, profile)?,
            None => {
                let mut c = PipelineConfig::profile(profile);
                c.apply_env();
                c
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage (1, 2, 3) or all of them.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "all")]
        stage: String,
        /// Write per-pair intermediate images of the held-out evaluation.
        #[arg(long)]
        dump_intermediates: bool,
    },
    /// Score predicted try-ons against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// IS classifier checkpoint; IS is skipped without one.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        splits: usize,
    },
    /// Try-on for every pair of a dataset directory, then score it.
    BatchInfer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trained run; defaults to the config's output_dir.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_intermediates: bool,
    },
    /// HTTP service over a trained run.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Dataset supplying the person and garment catalog; defaults to the
        /// config's dataset root.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Write a synthetic corpus.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
    },
    /// Aggregate an A/B vote file (`pair_id,method_a,method_b,vote`).
    Ab {
        #[arg(long)]
        votes: PathBuf,
        /// Method shown on the second row of every column pair.
        #[arg(long, default_value = "Ours")]
        reference: String,
        /// Known method ids, comma separated; defaults to those in the file.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            stage,
            dump_intermediates,
        } => {
            let cfg = config.load()?;
            let stage: Stage = stage.parse()?;
            let summary = train(&cfg, stage, &TrainOptions { dump_intermediates })?;
            println!("run: {}", cfg.output_dir.display());
            println!("manifest_hash: {}", summary.manifest.manifest_hash);
            if let Some(r) = summary.report {
                println!("{}", serde_json::to_string_pretty(&r)?);
            }
        }
        Command::Eval {
            pred,
            gt,
            report,
            classifier,
            splits,
        } => {
            let classifier = classifier
                .map(|p| PatternClassifier::from_checkpoint(&Checkpoint::load(p)?))
                .transpose()?;
            let r = evaluate_dirs(&pred, &gt, classifier.as_ref(), splits)?;
            write_json(&report, &r)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::BatchInfer {
            config,
            run,
            pairs,
            out,
            dump_intermediates,
        } => {
            let cfg = config.load()?;
            let run = run.unwrap_or(cfg.output_dir.clone());
            let pipeline = Pipeline::load(&run)?;
            let r = batch_infer(&pipeline, &pairs, &out, dump_intermediates, cfg.is_splits)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Serve { config, run, data, addr } => {
            let cfg = config.load()?;
            let run = run.unwrap_or(cfg.output_dir.clone());
            let data = data.unwrap_or(cfg.dataset.root.clone());
            let pipeline = Pipeline::load(&run).with_context(|| format!("loading run {}", run.display()))?;
            let catalog = Catalog::from_dataset(&data)?;
            if catalog.garments.is_empty() {
                bail!("no garments found under {}", data.join("pairs").display());
            }
            log::info!(
                "serving {} garments from {} on {addr} (manifest {})",
                catalog.garments.len(),
                data.display(),
                pipeline.manifest.manifest_hash
            );
            let app = router(Arc::new(AppState::new(pipeline, catalog)));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                axum::serve(listener, app).await?;
                anyhow::Ok(())
            })?;
        }
        Command::Generate {
            out,
            count,
            first_seed,
            height,
            width,
        } => {
            let corpus = generate_corpus(first_seed, count, height, width)?;
            write_corpus(&out, &corpus)?;
            println!("wrote {count} pairs to {}", out.join("pairs").display());
        }
        Command::Ab {
            votes,
            reference,
            methods,
            json,
        } => {
            let text = std::fs::read_to_string(&votes).with_context(|| format!("reading {}", votes.display()))?;
            let methods = match methods {
                Some(m) => m,
                None => methods_in(&text),
            };
            let comparisons = ab_aggregate(&ABStudy::from_csv(&text, methods)?)?;
            println!("{}", format_ab_table(&comparisons, &reference)?);
            if let Some(path) = json {
                write_json(&path, &comparisons)?;
            }
        }
    }
    Ok(())
}

/// Method ids named in the method columns of a vote file, in order of
/// first appearance.
fn methods_in(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 && line.starts_with("pair_id") {
            continue;
        }
        for m in line.split(',').skip(1).take(2).map(str::trim) {
            if !m.is_empty() && !out.iter().any(|k| k == m) {
                out.push(m.to_string());
            }
        }
    }
    out
}
