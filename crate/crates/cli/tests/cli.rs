//! End-to-end runs of the `cae` binary on a small synthetic setup.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cae_cli::config::{Profile, RunConfig};
use cae_core::coder::{self, CompressOptions, Policy, Setting};
use cae_core::image::RgbImage;
use cae_core::model_io::load_ensemble;

fn cae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cae")).args(args).output().expect("spawn cae")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = cae(args);
    assert!(
        out.status.success(),
        "cae {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn small_config(dir: &Path, out: &str) -> PathBuf {
    let mut cfg = RunConfig::for_profile(Profile::Desk);
    cfg.out_dir = dir.join(out);
    cfg.synthetic.as_mut().unwrap().count = 4;
    cfg.net.base_filters = 4;
    cfg.train.max_steps = 12;
    cfg.train.batch_size = 2;
    cfg.train.crop_size = 16;
    cfg.ensemble.truncate(2);
    cfg.ensemble[0].code_channels = 4;
    cfg.ensemble[1].code_channels = 3;
    cfg.finetune.iterations = 3;
    cfg.finetune.batch_size = 2;
    cfg.finetune.crop_size = 16;
    cfg.finetune.alphas = vec![vec![0.03], vec![]];
    let path = dir.join(format!("{out}.json"));
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn pipeline_is_reproducible_and_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = small_config(dir, "run_a");
    ok(&["train", "--config", &s(&config)]);
    let resolved = dir.join("run_a").join("resolved_config.json");
    assert!(dir.join("run_a").join("trace_model0.csv").exists());
    assert!(dir.join("run_a").join("trace_model1.csv").exists());

    // retrain from the resolved artifact alone
    ok(&["train", "--config", &s(&resolved), "--out-dir", &s(&dir.join("run_b"))]);
    let a = std::fs::read(dir.join("run_a").join("ensemble.cae")).unwrap();
    let b = std::fs::read(dir.join("run_b").join("ensemble.cae")).unwrap();
    assert_eq!(a, b, "model bytes differ between identical runs");

    let models = dir.join("run_a").join("ensemble.cae");
    let data = dir.join("data");
    ok(&["gen-data", "--out", &s(&data), "--count", "3", "--width", "30", "--height", "22", "--seed", "9"]);
    let input = data.join("texture_0001.ppm");
    let packed = dir.join("img.cae");
    let meta = ok(&[
        "compress",
        "--model",
        &s(&models),
        "--input",
        &s(&input),
        "--out",
        &s(&packed),
        "--setting",
        "0:0:32768",
    ]);
    assert_eq!(meta["interp_weight"], 32768);
    let decoded = dir.join("img.ppm");
    ok(&["decompress", "--model", &s(&models), "--input", &s(&packed), "--out", &s(&decoded)]);

    // in-process pipeline gives the same bytes and pixels
    let ens = load_ensemble(&models).unwrap();
    let img = RgbImage::read(&input).unwrap();
    let setting = Setting {
        model_id: 0,
        scale_set: 0,
        interp_weight: 32768,
    };
    let cand = coder::compress(&ens, &img, Policy::Fixed(setting), CompressOptions::default()).unwrap();
    assert_eq!(std::fs::read(&packed).unwrap(), cand.file.to_bytes());
    assert_eq!(RgbImage::read(&decoded).unwrap(), cand.reconstruction);

    // evaluate reports the same numbers
    let rd = dir.join("rd.csv");
    ok(&["evaluate", "--models", &s(&models), "--dir", &s(&data), "--out", &s(&rd)]);
    let text = std::fs::read_to_string(&rd).unwrap();
    let row = text
        .lines()
        .find(|l| l.starts_with("texture_0001.ppm,cae-m0-s0-w32768,"))
        .expect("row for the setting");
    let cols: Vec<&str> = row.split(',').collect();
    assert_eq!(cols[2].parse::<f64>().unwrap(), cand.bpp());
    assert_eq!(cols[3].parse::<f64>().unwrap(), cand.mse);
    assert!(dir.join("rd_summary.csv").exists());
    assert!(dir.join("rd.gp").exists());

    // every non-train command leaves a replayable record
    let record = dir.join("img.cae.run.json");
    std::fs::remove_file(&packed).unwrap();
    ok(&["rerun", &s(&record)]);
    assert_eq!(std::fs::read(&packed).unwrap(), cand.file.to_bytes());
}

#[test]
fn errors_are_structured_json() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = cae(&["compress", "--model", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "usage");

    let bogus = dir.join("bogus.cae");
    std::fs::write(&bogus, b"not a model").unwrap();
    let out = cae(&["decompress", "--model", &s(&bogus), "--input", &s(&bogus), "--out", &s(&dir.join("o.ppm"))]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(v["error"]["message"].as_str().unwrap().len() > 0);
    assert!(matches!(v["error"]["kind"].as_str(), Some("format" | "corrupt")));

    let cfg = dir.join("bad.json");
    std::fs::write(&cfg, r#"{"seed": 1, "surprise": true}"#).unwrap();
    let out = cae(&["train", "--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "config");
}

#[test]
fn unreachable_target_lists_rates() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = small_config(dir, "run");
    ok(&["train", "--config", &s(&config)]);
    let data = dir.join("data");
    ok(&["gen-data", "--out", &s(&data), "--count", "1", "--width", "16", "--height", "16"]);
    let out = cae(&[
        "compress",
        "--model",
        &s(&dir.join("run").join("ensemble.cae")),
        "--input",
        &s(&data.join("texture_0000.ppm")),
        "--out",
        &s(&dir.join("x.cae")),
        "--target-bpp",
        "0.01",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "target_unreachable");
    assert!(!v["error"]["achievable_bpp"].as_array().unwrap().is_empty());
}
