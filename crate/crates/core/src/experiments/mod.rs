//! End-to-end runs behind the command-line tool: pre-training, the
//! all-masked leakage experiment, ablation grids, fine-tuning,
//! reconstruction export and model info. Each run writes a manifest.

mod ablate;
mod finetune;
mod info;
mod leakage;
mod manifest;
mod pretrain;
mod reconstruct;

pub use ablate::{run_ablation, Grid, TABLE_FILE};
pub use finetune::{check_compatible, run_finetune, FinetuneSummary};
pub use info::{model_info, ModelInfo};
pub use leakage::{run_leakage, LeakageReport};
pub use manifest::{MetricRow, RunManifest, CSV_HEADER, MANIFEST_FILE, METRICS_FILE};
pub use pretrain::{run_pretrain, FINAL_CHECKPOINT};
pub use reconstruct::{
    reconstruct, run_reconstruct, Reconstruction, INPUT_FILE, RECONSTRUCTION_FILE, VISIBLE_FILE,
};
