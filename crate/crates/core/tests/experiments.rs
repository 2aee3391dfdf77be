use pcpmae::error::Error;
use pcpmae::experiments::{
    check_compatible, model_info, reconstruct, Grid, MetricRow, RunManifest, MANIFEST_FILE,
    METRICS_FILE,
};
use pcpmae::geometry::{gen_synthetic_shape, ShapeKind};
use pcpmae::model::{count_params, Block, ModelConfig, PcpMae};
use pcpmae::tensorcore::Tensor;
use pcpmae::training::RunConfig;

fn tiny() -> RunConfig {
    RunConfig::from_json(
        r#"{"dim": 24, "encoder_depth": 2, "decoder_depth": 1, "heads": 4,
            "patch_size": 8, "num_patches": 8, "num_points": 64, "cloud_points": 256}"#,
    )
    .unwrap()
}

fn row(epoch: usize) -> MetricRow {
    MetricRow {
        epoch,
        loss: 1.0,
        ..Default::default()
    }
}

#[test]
fn manifest_is_written_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = RunManifest::new("pretrain", &tiny(), 3);
    m.push(row(1)).unwrap();
    assert!(m.push(row(1)).is_err());
    m.push(row(2)).unwrap();
    m.flush_partial(dir.path()).unwrap();
    assert!(!dir.path().join(MANIFEST_FILE).exists());
    m.finish(dir.path()).unwrap();
    assert!(dir.path().join(MANIFEST_FILE).exists());
    assert!(!dir.path().join(format!("{MANIFEST_FILE}.partial")).exists());
    let back = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(back, m);
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn grid_expands_axes_and_reports_bad_cells() {
    let g = Grid::parse(
        r#"{"base": {"epochs": 1}, "axes": {"eta": [0, 0.1], "mask_ratio": [0.3, 0.6, 0.9]}}"#,
    )
    .unwrap();
    assert_eq!(g.cells.len(), 6);
    assert_eq!(g.varied_keys(), ["eta", "mask_ratio"]);
    let mut seen: Vec<(f64, f64)> = (0..6)
        .map(|i| {
            let c = g.config(i).unwrap();
            assert_eq!(c.train.epochs, 1);
            (c.train.eta, c.train.mask_ratio)
        })
        .collect();
    seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    seen.dedup();
    assert_eq!(seen.len(), 6);

    let g =
        Grid::parse(r#"{"axes": {"eta": [0.5]}, "cells": [{"stop_gradient": false}]}"#).unwrap();
    assert_eq!(g.cells.len(), 2);

    let err = Grid::parse(r#"{"cells": [{}, {}, {"heads": 5}]}"#)
        .unwrap_err()
        .to_string();
    assert!(err.contains("cell 2"), "{err}");
    assert!(Grid::parse(r#"{"cell": []}"#).is_err());
    assert!(Grid::parse(r#"{"cells": []}"#).is_err());
    assert!(Grid::parse(r#"{"cells": [{}], "workers": 0}"#).is_err());
}

#[test]
fn compatibility_names_the_differing_field() {
    let a = ModelConfig::desk();
    assert!(check_compatible(&a, &a).is_ok());
    let mut b = a.clone();
    b.num_patches = 32;
    match check_compatible(&a, &b).unwrap_err() {
        Error::ConfigMismatch {
            field,
            checkpoint,
            config,
        } => {
            assert_eq!(field, "num_patches");
            assert_eq!(checkpoint, "16");
            assert_eq!(config, "32");
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn info_difference_is_one_encoder_stack() {
    let cfg = ModelConfig::desk();
    let info = model_info(&cfg);
    assert_eq!(info.shared, count_params(&cfg));
    assert_eq!(
        info.unshared - info.shared,
        cfg.encoder_depth * Block::num_params(cfg.dim, cfg.mlp_ratio)
    );
    assert_eq!(info.breakdown.total(), info.shared);
}

#[test]
fn reconstruct_without_masking_returns_visible_points() {
    let run = tiny();
    let model = PcpMae::<f32>::new(run.model.clone(), 0).unwrap();
    let cloud = gen_synthetic_shape(ShapeKind::Cube, 256, 0.0, 1).unwrap();
    let r = reconstruct(&model, &run, &cloud, 0.0, 9).unwrap();
    assert_eq!(r.masked_points, 0);
    assert_eq!(r.input.len(), 64);
    assert_eq!(r.visible.points, r.reconstruction.points);
}

#[test]
fn zero_head_reconstructs_masked_regions_at_their_centers() {
    let run = tiny();
    let mut model = PcpMae::<f32>::new(run.model.clone(), 0).unwrap();
    for id in [model.head.weight, model.head.bias.unwrap()] {
        let shape = model.store.get(id).shape().to_vec();
        *model.store.get_mut(id) = Tensor::zeros(&shape);
    }
    let cloud = gen_synthetic_shape(ShapeKind::Torus, 256, 0.0, 2).unwrap();
    let r = reconstruct(&model, &run, &cloud, 0.5, 4).unwrap();
    assert_eq!(r.reconstruction.len(), r.input.len());
    let rebuilt = &r.reconstruction.points[r.reconstruction.len() - r.masked_points..];
    assert!(!rebuilt.is_empty());
    let mut distinct: Vec<[f32; 3]> = rebuilt.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    assert!(distinct.len() <= 4);
    // every center is a sampled point, and no visible point is one of them
    for c in &distinct {
        assert!(r.input.points.contains(c));
        assert!(!r.visible.points.contains(c));
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let name = path.file_name().unwrap().to_str().unwrap();
        if name.starts_with("grid_") {
            Grid::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        } else {
            RunConfig::from_json(&text)
                .and_then(|c| c.validate())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        seen += 1;
    }
    assert_eq!(seen, 5);
    let desk = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json"),
    )
    .unwrap();
    assert_eq!(RunConfig::from_json(&desk).unwrap(), RunConfig::default());
}
