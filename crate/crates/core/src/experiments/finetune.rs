use std::path::Path;

use serde_json::Value;

use super::manifest::{MetricRow, RunManifest};
use crate::error::{Error, Result};
use crate::geometry::{synthetic_dataset, ShapeKind};
use crate::model::{ModelConfig, PcpMae};
use crate::training::{finetune_classifier, Checkpoint, FinetuneConfig, FinetuneReport, RunConfig};

/// Errors with the first model field that differs between a checkpoint and
/// the requested config.
pub fn check_compatible(checkpoint: &ModelConfig, config: &ModelConfig) -> Result<()> {
    let a = serde_json::to_value(checkpoint)?;
    let b = serde_json::to_value(config)?;
    let (Value::Object(a), Value::Object(b)) = (a, b) else {
        unreachable!("model config serializes to an object")
    };
    for (key, va) in &a {
        let vb = &b[key];
        if va != vb {
            return Err(Error::ConfigMismatch {
                field: key.clone(),
                checkpoint: va.to_string(),
                config: vb.to_string(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSummary {
    pub reports: Vec<FinetuneReport>,
    pub mean: f64,
    pub std: f64,
}

/// Fine-tunes one classifier per seed on the 8-class synthetic benchmark,
/// starting from `checkpoint` or from scratch, and records mean and
/// (population) standard deviation of held-out accuracy.
pub fn run_finetune(
    checkpoint: Option<&Checkpoint>,
    run: &RunConfig,
    config: &FinetuneConfig,
    seeds: &[u64],
    out: &Path,
    mut on_seed: impl FnMut(&FinetuneReport),
) -> Result<(RunManifest, FinetuneSummary)> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if let Some(ckpt) = checkpoint {
        check_compatible(&ckpt.config.model, &run.model)?;
    }
    run.model.validate()?;
    std::fs::create_dir_all(out)?;
    let classes = ShapeKind::ALL.len();
    let train = synthetic_dataset::<f32>(
        config.train_size,
        config.cloud_points,
        config.noise,
        config.train_data_seed,
    )?;
    let test = synthetic_dataset::<f32>(
        config.test_size,
        config.cloud_points,
        config.noise,
        config.test_data_seed,
    )?;
    let snapshot = serde_json::json!({
        "model": run.model,
        "finetune": config,
        "pretrained": checkpoint.is_some(),
    });
    let mut manifest = RunManifest::new("finetune", &snapshot, seeds[0]);
    let mut reports = Vec::new();
    for &seed in seeds {
        let backbone = match checkpoint {
            Some(ckpt) => ckpt.model::<f32>()?,
            None => PcpMae::new(run.model.clone(), seed)?,
        };
        let r = finetune_classifier(backbone, run, &train, &test, classes, config, seed)?;
        on_seed(&r);
        reports.push(r);
    }
    for epoch in 0..config.epochs {
        let loss = reports.iter().map(|r| r.train_loss[epoch]).sum::<f64>() / reports.len() as f64;
        manifest.push(MetricRow {
            epoch: epoch + 1,
            loss,
            loss_recon: 0.0,
            ..Default::default()
        })?;
    }
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
    manifest.set("seeds", seeds);
    manifest.set("accuracies", &accs);
    manifest.set(
        "initial_accuracies",
        reports
            .iter()
            .map(|r| r.initial_accuracy)
            .collect::<Vec<_>>(),
    );
    manifest.set("mean_accuracy", mean);
    manifest.set("std_accuracy", std);
    manifest.finish(out)?;
    Ok((manifest, FinetuneSummary { reports, mean, std }))
}
