use std::path::Path;
use std::process::{Command, Output};

use pcpmae::experiments::{RunManifest, CSV_HEADER, MANIFEST_FILE, METRICS_FILE, TABLE_FILE};
use pcpmae::geometry::{read_ply, write_xyz, PointCloud};
use pcpmae::model::Block;

const TINY: &str = r#"{
    "dim": 24, "encoder_depth": 2, "decoder_depth": 1, "heads": 4,
    "patch_size": 8, "num_patches": 4, "num_points": 32,
    "dataset_size": 16, "cloud_points": 64, "batch_size": 8,
    "epochs": 2, "warmup_epochs": 1
}"#;

const TINY_FINETUNE: &str =
    r#"{"epochs": 1, "train_size": 16, "test_size": 8, "cloud_points": 64, "batch_size": 8}"#;

fn pcpmae(args: &[&str]) -> Output {
    pcpmae_env(args, None)
}

fn pcpmae_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pcpmae"));
    cmd.args(args).env_remove("PCPMAE_SEED");
    if let Some(s) = seed {
        cmd.env("PCPMAE_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn manifest(dir: &Path) -> RunManifest {
    RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn info_reports_paper_size_and_sharing_difference() {
    let o = pcpmae(&["info", "--preset", "paper"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let shared: f64 = out
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .nth(3)
        .unwrap()
        .parse()
        .unwrap();
    assert!((shared - 29.5e6).abs() <= 0.1 * 29.5e6, "{out}");
    let diff: usize = out
        .lines()
        .find(|l| l.starts_with("difference"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(diff, 12 * Block::num_params(384, 4));

    let o = pcpmae(&["info"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    let desk = pcpmae::model::count_params(&pcpmae::model::ModelConfig::desk());
    assert!(out.contains(&desk.to_string()), "{out}");
}

#[test]
fn pretrain_one_desk_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = pcpmae(&["pretrain", "--out", s(&out), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m.metrics.len(), 1);
    assert_eq!(m.command, "pretrain");
    let csv = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 2);
    assert!(out.join("final.pcpm").exists());
    assert!(!out.join(format!("{MANIFEST_FILE}.partial")).exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for args in [
        vec!["pretrain", "--out", s(&out), "--mask-ratio", "1.5"],
        vec!["pretrain", "--out", s(&out), "--eta", "-1"],
        vec!["pretrain", "--out", s(&out), "--target", "colors"],
        vec!["pretrain", "--out", s(&out), "--pc-loss", "huber"],
        vec!["pretrain"],
        vec!["finetune", "--out", s(&out)],
        vec!["frobnicate"],
    ] {
        let o = pcpmae(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    let o = pcpmae_env(&["info"], Some("abc"));
    assert_eq!(code(&o), 2);
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let missing = dir.path().join("nope.json");
    let o = pcpmae(&["pretrain", "--out", s(&out), "--config", s(&missing)]);
    assert_eq!(code(&o), 1);
    let bad = write(dir.path(), "bad.json", r#"{"dim": 25}"#);
    let o = pcpmae(&["pretrain", "--out", s(&out), "--config", &bad]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("dim"), "{}", stderr(&o));
    let unknown = write(dir.path(), "unknown.json", r#"{"dimension": 24}"#);
    let o = pcpmae(&["info", "--config", &unknown]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eta_zero_is_reconstruction_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("run");
    let o = pcpmae(&["pretrain", "--config", &cfg, "--out", s(&out), "--eta", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m.metrics.len(), 2);
    for r in &m.metrics {
        assert!((r.loss - r.loss_recon).abs() <= 1e-6);
    }
    assert!(m.summary["max_objective_split_error"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn same_flags_same_manifest_and_env_seed_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let run = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        let o = pcpmae_env(
            &[
                "pretrain",
                "--config",
                &cfg,
                "--out",
                s(&out),
                "--seed",
                "5",
            ],
            seed,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut m = manifest(&out);
        m.started = 0.0;
        m.finished = None;
        m.outputs.clear();
        m
    };
    let a = run("a", None);
    let b = run("b", None);
    assert_eq!(a, b);
    assert_eq!(a.seed, 5);
    let c = run("c", Some("9"));
    assert_eq!(c.seed, 9);
    assert_ne!(c.metrics, a.metrics);
}

#[test]
fn leakage_has_no_visible_tokens_and_valid_ply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("leak");
    let o = pcpmae(&[
        "leakage",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--epochs",
        "2",
        "--exports",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m.metrics.len(), 2);
    assert!(m.metrics.iter().all(|r| r.visible == 0 && r.masked == 4));
    assert!(m.summary["baseline_chamfer"].as_f64().unwrap() > 0.0);
    let plys: Vec<_> = m.outputs.iter().filter(|p| p.ends_with(".ply")).collect();
    assert_eq!(plys.len(), 4);
    for p in plys {
        let cloud = read_ply(p).unwrap();
        assert_eq!(cloud.points.len(), 32);
        assert!(cloud.colors.is_some());
    }
}

#[test]
fn ablation_grid_cells() {
    let dir = tempfile::tempdir().unwrap();
    let grid = r#"{
        "base": {"dim": 24, "encoder_depth": 1, "decoder_depth": 1, "heads": 2,
                 "patch_size": 4, "num_patches": 64, "num_points": 128,
                 "dataset_size": 4, "cloud_points": 128, "batch_size": 4,
                 "epochs": 1, "warmup_epochs": 0, "augmentations": []},
        "axes": {"mask_ratio": [0.2, 0.6, 0.9]}
    }"#;
    let path = write(dir.path(), "grid.json", grid);
    let out = dir.path().join("grid");
    let o = pcpmae(&["ablate", "--grid", &path, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let masked: Vec<usize> = (0..3)
        .map(|i| manifest(&out.join(format!("cell_{i:03}"))).metrics[0].masked)
        .collect();
    assert_eq!(masked, [12, 38, 57]);
    let table = std::fs::read_to_string(out.join(TABLE_FILE)).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.starts_with("cell,mask_ratio,loss"));

    let cells = r#"{
        "base": {"dim": 24, "encoder_depth": 1, "decoder_depth": 1, "heads": 2,
                 "patch_size": 8, "num_patches": 4, "num_points": 32,
                 "dataset_size": 8, "cloud_points": 64, "batch_size": 8,
                 "epochs": 1, "warmup_epochs": 0},
        "cells": [{"stop_gradient": true}, {"stop_gradient": false}],
        "workers": 2
    }"#;
    let path = write(dir.path(), "cells.json", cells);
    let out = dir.path().join("cells");
    let o = pcpmae(&["ablate", "--grid", &path, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifests: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join(MANIFEST_FILE).exists())
        .collect();
    assert_eq!(manifests.len(), 2);
    for i in 0..2 {
        let m = manifest(&out.join(format!("cell_{i:03}")));
        assert!(m.metrics.iter().all(|r| r.loss.is_finite()));
    }
    let table = std::fs::read_to_string(out.join(TABLE_FILE)).unwrap();
    assert_eq!(table.lines().count(), 3);

    let broken = r#"{"cells": [{"eta": 0.1}, {"mask_ratio": 3.0}]}"#;
    let path = write(dir.path(), "broken.json", broken);
    let o = pcpmae(&["ablate", "--grid", &path, "--out", s(&dir.path().join("b"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cell 1"), "{}", stderr(&o));
}

#[test]
fn finetune_scratch_and_checkpoint_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let ft = write(dir.path(), "ft.json", TINY_FINETUNE);
    let out = dir.path().join("ft");
    let o = pcpmae(&[
        "finetune",
        "--scratch",
        "--config",
        &cfg,
        "--finetune-config",
        &ft,
        "--out",
        s(&out),
        "--seeds",
        "1,2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m.summary["accuracies"].as_array().unwrap().len(), 2);

    let pre = dir.path().join("pre");
    let o = pcpmae(&[
        "pretrain",
        "--config",
        &cfg,
        "--out",
        s(&pre),
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = pre.join("final.pcpm");
    let o = pcpmae(&[
        "finetune",
        "--checkpoint",
        s(&ckpt),
        "--finetune-config",
        &ft,
        "--out",
        s(&out),
        "--seeds",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let wide = write(
        dir.path(),
        "wide.json",
        &TINY.replace("\"dim\": 24", "\"dim\": 48"),
    );
    let o = pcpmae(&[
        "finetune",
        "--checkpoint",
        s(&ckpt),
        "--config",
        &wide,
        "--finetune-config",
        &ft,
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(
        err.contains("dim") && err.contains("24") && err.contains("48"),
        "{err}"
    );

    let o = pcpmae(&[
        "finetune",
        "--checkpoint",
        s(&dir.path().join("missing.pcpm")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn reconstruct_exports_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let pre = dir.path().join("pre");
    let o = pcpmae(&[
        "pretrain",
        "--config",
        &cfg,
        "--out",
        s(&pre),
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cloud: PointCloud<f64> =
        pcpmae::geometry::gen_synthetic_shape(pcpmae::geometry::ShapeKind::Torus, 100, 0.0, 3)
            .unwrap();
    let xyz = dir.path().join("torus.xyz");
    write_xyz(&cloud, &xyz).unwrap();
    let ckpt = pre.join("final.pcpm");
    for m in ["0", "0.5"] {
        let out = dir.path().join(format!("rec{m}"));
        let o = pcpmae(&[
            "reconstruct",
            "--checkpoint",
            s(&ckpt),
            "--input",
            s(&xyz),
            "--mask-ratio",
            m,
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let input = read_ply(out.join("input.ply")).unwrap();
        let visible = read_ply(out.join("visible.ply")).unwrap();
        let rec = read_ply(out.join("reconstruction.ply")).unwrap();
        assert_eq!(input.points.len(), 32);
        assert_eq!(rec.points.len(), 32);
        if m == "0" {
            assert_eq!(visible.points, rec.points);
        } else {
            assert!(visible.points.len() < 32);
        }
    }
}
