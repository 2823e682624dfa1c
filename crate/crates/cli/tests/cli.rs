use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const BENCH: &str = r#"{"image_size": 16, "counts": {"train": 8, "val": 4, "test_id": 4, "test_ood": 4},
  "center_sigma": 1.0, "max_offset": 4.0, "ood": {"held_out_shape": "crescent", "offset_threshold": 2.0}}"#;
const TRAIN: &str = r#"{"epochs": 1, "batch_size": 4, "ensemble_size": 3, "latent_dim": 3,
  "encoder_channels": [4, 6, 8], "decoder_width": 4, "alpha_channels": [4, 4], "beta_channels": [4, 4, 4, 4],
  "disc_width": 4, "langevin_steps": 3, "mc_passes": 3}"#;

fn duq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duq"))
        .args(args)
        .current_dir(dir)
        .env("DUQ_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = duq(dir, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn hashes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.is_file() {
            out.insert(d.clone(), Sha256::digest(fs::read(&d).unwrap()).to_vec());
            continue;
        }
        for e in fs::read_dir(&d).unwrap() {
            stack.push(e.unwrap().path());
        }
    }
    out
}

/// Dataset and one trained checkpoint per method in a fresh directory.
fn workspace(methods: &[(&str, &str)]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("bench.json"), BENCH).unwrap();
    fs::write(p.join("train.json"), TRAIN).unwrap();
    ok(
        p,
        &[
            "gen-data",
            "--config",
            "bench.json",
            "--out",
            "data",
            "--seed",
            "7",
        ],
    );
    for (cmd, method) in methods {
        let out = format!("runs/{method}");
        let mut args = vec![
            *cmd,
            "--config",
            "train.json",
            "--data",
            "data",
            "--out",
            &out,
        ];
        if !method.is_empty() {
            args.extend(["--method", method]);
        }
        ok(p, &args);
    }
    dir
}

#[test]
fn eval_is_read_only_and_writes_every_map() {
    let dir = workspace(&[("train", "full")]);
    let p = dir.path();
    let before = (hashes(&p.join("data")), hashes(&p.join("runs")));
    let stdout = ok(
        p,
        &[
            "eval",
            "--ckpt",
            "runs/full/checkpoint.duqc",
            "--data",
            "data",
            "--report",
            "out/r.json",
            "--maps",
            "maps",
        ],
    );
    assert!(stdout.contains("pavpu"));
    assert_eq!(before, (hashes(&p.join("data")), hashes(&p.join("runs"))));
    for f in ["out/r.json", "out/r.csv", "out/r.manifest.json"] {
        assert!(p.join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(p.join("out/r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    for i in 0..4 {
        for kind in ["aleatoric", "epistemic", "predictive"] {
            let stem = p.join(format!("maps/test_id/{i:05}_{kind}"));
            let map = duq_core::synth::read_dmap(stem.with_extension("dmap")).unwrap();
            assert_eq!((map.height(), map.width()), (16, 16));
            let pgm = fs::read(stem.with_extension("pgm")).unwrap();
            assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
            assert_eq!(pgm.len(), 13 + 256);
        }
    }
}

#[test]
fn manifests_record_resolved_config() {
    let dir = workspace(&[("train", "base"), ("baseline", "cvae")]);
    let p = dir.path();
    let read = |f: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(p.join(f)).unwrap()).unwrap()
    };
    let gen = read("data/run_manifest.json");
    assert_eq!(gen["seed"], 7);
    assert_eq!(gen["config"]["seed"], 7);
    assert_eq!(gen["config"]["image_size"], 16);
    assert_eq!(gen["subcommand"], "gen-data");
    assert_eq!(gen["tool_version"], env!("CARGO_PKG_VERSION"));
    let base = read("runs/base/run_manifest.json");
    assert_eq!(base["config"]["train"]["method"], "base");
    assert_eq!(base["config"]["train"]["lr"], 1e-3);
    let cvae = read("runs/cvae/run_manifest.json");
    assert_eq!(cvae["subcommand"], "baseline");
    assert_eq!(cvae["config"]["train"]["method"], "cvae");
    assert!(cvae["wall_time_s"].as_f64().unwrap() >= 0.0);
    let artifacts: Vec<String> = cvae["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a.as_str().unwrap().to_string())
        .collect();
    assert!(artifacts.iter().any(|a| a.ends_with("checkpoint.duqc")));
    for a in artifacts {
        assert!(p.join(a).exists());
    }
}

#[test]
fn gen_data_is_reproducible_from_its_manifest() {
    let dir = workspace(&[]);
    let p = dir.path();
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("data/run_manifest.json")).unwrap())
            .unwrap();
    fs::write(p.join("resolved.json"), m["config"].to_string()).unwrap();
    ok(
        p,
        &["gen-data", "--config", "resolved.json", "--out", "again"],
    );
    let strip = |root: &Path| -> BTreeMap<PathBuf, Vec<u8>> {
        hashes(root)
            .into_iter()
            .filter(|(k, _)| !k.ends_with("run_manifest.json"))
            .map(|(k, v)| (k.strip_prefix(root).unwrap().to_path_buf(), v))
            .collect()
    };
    assert_eq!(strip(&p.join("data")), strip(&p.join("again")));
}

#[test]
fn report_merges_eval_outputs() {
    let dir = workspace(&[("train", "base"), ("baseline", "mc-dropout")]);
    let p = dir.path();
    for m in ["base", "mc-dropout"] {
        for split in ["test-id", "test-ood"] {
            let ckpt = format!("runs/{m}/checkpoint.duqc");
            let report = format!("reports/{m}_{split}.json");
            ok(
                p,
                &[
                    "eval", "--ckpt", &ckpt, "--data", "data", "--report", &report, "--split",
                    split,
                ],
            );
        }
    }
    let stdout = ok(
        p,
        &[
            "report",
            "--inputs",
            "reports/base_test-id.json",
            "reports/base_test-ood.json",
            "reports/mc-dropout_test-id.csv",
            "reports/mc-dropout_test-ood.json",
            "--out",
            "table.csv",
        ],
    );
    assert_eq!(stdout.lines().count(), 3);
    let table = fs::read_to_string(p.join("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0]
        .starts_with("method,test_id:mae,test_id:f_beta,test_id:ece_d,test_id:pavpu,test_ood:mae"));
    assert!(rows[1].starts_with("base,"));
    assert!(rows[2].starts_with("mc-dropout,"));
    assert_eq!(rows[2].split(',').count(), 9);
    assert!(p.join("table.manifest.json").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = duq(p, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(
        duq(p, &["gen-data", "--out", "x", "--bogus"]).status.code(),
        Some(1)
    );
    assert_eq!(
        duq(
            p,
            &["baseline", "--method", "full", "--data", "d", "--out", "o"]
        )
        .status
        .code(),
        Some(1)
    );
    assert_eq!(duq(p, &["--help"]).status.code(), Some(0));
    fs::write(p.join("bad.json"), r#"{"epochs": 0}"#).unwrap();
    let o = duq(
        p,
        &["train", "--config", "bad.json", "--data", "d", "--out", "o"],
    );
    assert_eq!(o.status.code(), Some(1));
    let o = duq(
        p,
        &[
            "eval",
            "--ckpt",
            "missing.duqc",
            "--data",
            "d",
            "--report",
            "r.json",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!p.join("r.json").exists());
    fs::write(p.join("junk.duqc"), b"not a checkpoint").unwrap();
    fs::create_dir(p.join("d")).unwrap();
    let o = duq(
        p,
        &[
            "eval",
            "--ckpt",
            "junk.duqc",
            "--data",
            "d",
            "--report",
            "r.json",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_duq"))
        .args(["grad-check"])
        .env("DUQ_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_reports_every_layer_kind() {
    let dir = tempfile::tempdir().unwrap();
    let o = duq(dir.path(), &["grad-check", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    for kind in [
        "dense",
        "conv2d",
        "leaky_relu",
        "relu",
        "sigmoid",
        "batch_norm",
        "nearest_upsample",
        "elvm",
    ] {
        assert!(out.lines().any(|l| l.starts_with(kind)), "{kind}");
    }
    assert!(out.lines().last().unwrap().ends_with("pass"));
}
