use std::path::Path;

use super::manifest::{MetricRow, RunManifest};
use crate::error::Result;
use crate::model::count_params;
use crate::training::{EpochReport, RunConfig, Trainer};

pub const FINAL_CHECKPOINT: &str = "final.pcpm";

impl MetricRow {
    pub fn from_epoch(r: &EpochReport) -> Self {
        MetricRow {
            epoch: r.epoch + 1,
            loss: r.loss,
            loss_pc: r.loss_pc,
            loss_recon: r.loss_recon,
            lr: r.lr,
            visible: r.visible,
            masked: r.masked,
            accuracy: None,
        }
    }
}

/// Pre-trains in `f32`, writing checkpoints, a manifest and a metrics CSV to
/// `out`. `save_every` adds intermediate checkpoints every that many epochs.
pub fn run_pretrain(
    config: RunConfig,
    out: &Path,
    save_every: Option<usize>,
    mut on_epoch: impl FnMut(&MetricRow),
) -> Result<RunManifest> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("pretrain", &config, config.train.seed);
    let mut trainer = Trainer::<f32>::new(config.clone())?;
    let eta = config.train.eta;
    let mut worst_split: f64 = 0.0;
    while !trainer.is_finished() {
        let report = trainer.run_epoch_with(|s| {
            worst_split = worst_split.max((s.loss - (eta * s.loss_pc + s.loss_recon)).abs());
        })?;
        let row = MetricRow::from_epoch(&report);
        on_epoch(&row);
        manifest.push(row)?;
        let epoch = report.epoch + 1;
        if save_every.is_some_and(|k| k > 0 && epoch % k == 0 && !trainer.is_finished()) {
            let path = out.join(format!("checkpoint_epoch{epoch:04}.pcpm"));
            trainer.checkpoint().save(&path)?;
            manifest.add_output(&path);
        }
        manifest.flush_partial(out)?;
    }
    let path = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&path)?;
    manifest.add_output(&path);
    let last = manifest.metrics.last().cloned().unwrap_or_default();
    manifest.set("steps", trainer.step_count());
    manifest.set("num_params", count_params(&config.model));
    manifest.set("final_loss", last.loss);
    manifest.set("final_loss_pc", last.loss_pc);
    manifest.set("final_loss_recon", last.loss_recon);
    manifest.set("visible_per_cloud", last.visible);
    manifest.set("masked_per_cloud", last.masked);
    manifest.set("max_objective_split_error", worst_split);
    manifest.finish(out)?;
    Ok(manifest)
}
