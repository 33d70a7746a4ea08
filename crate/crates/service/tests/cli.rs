mod common;

use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_style-vton"))
        .args(args)
        .env_remove("STYLE_VTON_DATA")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    assert!(!out.status.success(), "command unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_stage_one_then_two_needs_stage_one() {
    let dir = common::scratch("cli-stages");
    let cfg = common::write_tiny_config(&dir);
    let err = stderr(&cli(&["train", "--config", s(&cfg), "--stage", "2"]));
    assert!(err.contains("stage1.ckpt"), "{err}");

    ok(&cli(&["train", "--config", s(&cfg), "--stage", "1"]));
    let run = dir.join("run");
    assert!(run.join("stage1.ckpt").is_file());
    assert!(run.join("curves_stage1.csv").is_file());
    assert!(!run.join("stage2.ckpt").exists());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["artifacts"]["stage1.ckpt"].is_string());

    let err = stderr(&cli(&["train", "--config", s(&cfg), "--stage", "3"]));
    assert!(err.contains("stage2.ckpt"), "{err}");
}

#[test]
fn invalid_config_names_the_field() {
    let dir = common::scratch("cli-badcfg");
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, r#"{"epochs": {"parsing": "many"}}"#).unwrap();
    let err = stderr(&cli(&["train", "--config", s(&cfg)]));
    assert!(err.contains("epochs.parsing"), "{err}");

    std::fs::write(&cfg, r#"{"batch_sise": 4}"#).unwrap();
    let err = stderr(&cli(&["train", "--config", s(&cfg)]));
    assert!(err.contains("batch_sise"), "{err}");

    let err = stderr(&cli(&["train", "--profile", "huge"]));
    assert!(err.contains("huge"), "{err}");
}

#[test]
fn generate_batch_infer_and_eval() {
    let dir = common::scratch("cli-infer");
    let cfg = common::write_tiny_config(&dir);
    ok(&cli(&["train", "--config", s(&cfg)]));
    let run = dir.join("run");

    let pairs = dir.join("extra");
    let msg = ok(&cli(&[
        "generate", "--out", s(&pairs), "--count", "3", "--first-seed", "500", "--height", "32", "--width", "24",
    ]));
    assert!(msg.contains("wrote 3 pairs"));

    let out = dir.join("out");
    let args = ["batch-infer", "--config", s(&cfg), "--run", s(&run), "--pairs", s(&pairs), "--out", s(&out)];
    ok(&cli(&args));
    for id in ["00500", "00501", "00502"] {
        assert!(out.join(format!("{id}.png")).is_file());
    }
    let first = std::fs::read(out.join("report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["n_images"], 3);
    let ssim = report["ssim_mean"].as_f64().unwrap();
    assert!(ssim > -1.0 && ssim <= 1.0);

    ok(&cli(&args));
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), first);

    let eval_report = dir.join("eval.json");
    ok(&cli(&[
        "eval",
        "--pred",
        s(&out),
        "--gt",
        s(&pairs),
        "--report",
        s(&eval_report),
        "--classifier",
        s(&run.join("is_classifier.ckpt")),
        "--splits",
        "1",
    ]));
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(&eval_report).unwrap()).unwrap();
    assert_eq!(eval["n_images"], 3);
    assert!((eval["ssim_mean"].as_f64().unwrap() - ssim).abs() < 1e-3);
    assert!(eval["is_mean"].as_f64().unwrap() >= 1.0 - 1e-9);

    let empty = dir.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let err = stderr(&cli(&[
        "batch-infer", "--config", s(&cfg), "--run", s(&run), "--pairs", s(&empty), "--out", s(&dir.join("o2")),
    ]));
    assert!(err.contains("no pairs found"), "{err}");
}

#[test]
fn ab_prints_the_table() {
    let dir = common::scratch("cli-ab");
    let votes = dir.join("votes.csv");
    let mut text = String::from("pair_id,method_a,method_b,vote\n");
    for (i, vote) in ["Ours", "Ours", "Ours", "X"].iter().enumerate() {
        text.push_str(&format!("p{i},X,Ours,{vote}\n"));
    }
    std::fs::write(&votes, text).unwrap();
    let json = dir.join("ab.json");
    let out = ok(&cli(&["ab", "--votes", s(&votes), "--json", s(&json)]));
    assert_eq!(
        out,
        "Method | Proportion\n-------------------\nX      | 25.00%\nOurs   | 75.00%\n\n"
    );
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(v[0]["votes_b"], 3);

    let err = stderr(&cli(&["ab", "--votes", s(&votes), "--methods", "Ours"]));
    assert!(err.contains("unknown method id 'X'"), "{err}");
}
