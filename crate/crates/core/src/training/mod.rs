//! Masking, the two-term objective, the pre-training loop, checkpoints and
//! toy fine-tuning.

mod batch;
mod checkpoint;
mod config;
mod finetune;
mod loss;
mod mask;
mod trainer;

pub use batch::{make_batch, patchify, Batch};
pub use checkpoint::{Checkpoint, RngState, MAGIC, VERSION};
pub use config::{PcLoss, RunConfig, TrainConfig};
pub use finetune::{finetune_classifier, Classifier, FinetuneConfig, FinetuneReport};
pub use loss::{loss_pc, loss_recon, total_loss};
pub use mask::{mask_split, masked_count, MaskSplit};
pub use trainer::{pretrain_forward, EpochReport, ForwardLosses, StepReport, Trainer};
