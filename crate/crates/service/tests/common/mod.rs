#![allow(dead_code)]

use std::path::{Path, PathBuf};

use vton_core::harness::{train, PipelineConfig, Profile, Stage, TrainOptions};

/// Config for a 32×24 run over 10 synthetic pairs with one epoch per trainable.
pub const TINY_CONFIG: &str = r#"{
  "image": {"height": 32, "width": 24},
  "dataset": {"root": "data", "synthetic": {"first_seed": 100, "count": 10}, "held_out": 2},
  "output_dir": "run",
  "batch_size": 4,
  "is_splits": 1,
  "epochs": {"parsing": 1, "contour": 1, "texture_mapping": 1, "vae_constant": 1, "vae_decay": 1,
             "gan_constant": 1, "gan_decay": 1, "fashion_classifier": 1, "pattern_classifier": 1}
}"#;

/// Fresh scratch directory under the cargo target dir.
pub fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

/// Train the tiny config in `dir`; returns `(data_root, run_dir)`.
pub fn train_tiny(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = PipelineConfig::load(&write_tiny_config(dir), Profile::Toy).unwrap();
    train(&cfg, Stage::All, &TrainOptions::default()).unwrap();
    (cfg.dataset.root, cfg.output_dir)
}
