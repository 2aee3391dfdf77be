use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{make_batch, Batch};
use super::checkpoint::{Checkpoint, RngState};
use super::config::{RunConfig, TrainConfig};
use super::loss::{loss_pc, loss_recon, total_loss};
use crate::embedding::sincos_pe_var;
use crate::error::{Error, Result};
use crate::geometry::{synthetic_dataset, PointCloud};
use crate::model::{PcpMae, TargetMode};
use crate::scalar::Scalar;
use crate::tensorcore::{clip_grad_norm, cosine_lr, AdamW, OptimState, Tape, Tensor, Var};

/// Loss nodes of one pre-training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardLosses {
    pub loss: Var,
    pub loss_pc: Var,
    pub loss_recon: Var,
    /// Predicted masked patches `[B * nm, k, 3]`.
    pub reconstruction: Option<Var>,
}

/// Full pre-training forward pass on a prepared batch.
pub fn pretrain_forward<T: Scalar>(
    model: &PcpMae<T>,
    tape: &mut Tape<T>,
    batch: &Batch<T>,
    train: &TrainConfig,
) -> Result<ForwardLosses> {
    let (nv, nm) = (batch.num_visible(), batch.num_masked());
    let patches = tape.constant(batch.patches.clone());
    let centers = tape.constant(batch.centers.clone());
    let e = model.embed(tape, patches)?;
    let pe = model.center_pe(tape, centers)?;
    let visible_index = batch.visible_index();
    let masked_index = batch.masked_index();
    let visible = if nv > 0 {
        Some((
            tape.gather(e, 1, &visible_index)?,
            tape.gather(pe, 1, &visible_index)?,
        ))
    } else {
        None
    };
    let masked = if nm > 0 {
        Some(tape.gather(e, 1, &masked_index)?)
    } else {
        None
    };
    let out = model.joint_forward(tape, visible, masked)?;
    let (Some(pred), Some(gt), Some(masked_centers)) = (
        out.predicted,
        batch.masked_patches(),
        batch.masked_centers(),
    ) else {
        let zero = tape.constant(Tensor::scalar(T::zero()));
        return Ok(ForwardLosses {
            loss: zero,
            loss_pc: zero,
            loss_recon: zero,
            reconstruction: None,
        });
    };
    let target = match model.config.target_mode {
        TargetMode::Pem => {
            let t = tape.gather(pe, 1, &masked_index)?;
            if train.target_grad {
                t
            } else {
                tape.stop_gradient(t)
            }
        }
        TargetMode::Sincos => {
            let c = tape.constant(masked_centers);
            let t = sincos_pe_var(tape, c, model.config.dim)?;
            tape.stop_gradient(t)
        }
        TargetMode::Coords => tape.constant(masked_centers),
    };
    let pc = loss_pc(tape, pred, target, train.pc_loss)?;
    let dec_pe = model.decoder_masked_pe(tape, pred, train.stop_gradient)?;
    let dec_visible = out.visible.zip(visible.map(|(_, pe_v)| pe_v));
    let h = model.decoder_forward(tape, dec_visible, dec_pe)?;
    let rec = model.reconstruction_head(tape, h)?;
    let recon = loss_recon(tape, rec, &gt)?;
    let loss = total_loss(tape, pc, recon, train.eta)?;
    Ok(ForwardLosses {
        loss,
        loss_pc: pc,
        loss_recon: recon,
        reconstruction: Some(rec),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Zero-based index of the step just taken.
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub loss_pc: f64,
    pub loss_recon: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub visible: usize,
    pub masked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub loss_pc: f64,
    pub loss_recon: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub steps: usize,
    pub visible: usize,
    pub masked: usize,
}

impl EpochReport {
    /// Mean losses over `steps`; learning rate and token counts of the last.
    pub fn from_steps(epoch: usize, steps: &[StepReport]) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&StepReport) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let last = steps.last();
        EpochReport {
            epoch,
            loss: mean(|r| r.loss),
            loss_pc: mean(|r| r.loss_pc),
            loss_recon: mean(|r| r.loss_recon),
            lr: last.map_or(0.0, |r| r.lr),
            steps: steps.len(),
            visible: last.map_or(0, |r| r.visible),
            masked: last.map_or(0, |r| r.masked),
        }
    }
}

/// Pre-training loop state. Batches follow a per-epoch permutation derived
/// from the seed, so a run resumed from a checkpoint replays the same data.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: RunConfig,
    pub model: PcpMae<T>,
    pub optim: OptimState<T>,
    pub adamw: AdamW,
    rng: ChaCha8Rng,
    dataset: Vec<PointCloud<T>>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model on the synthetic dataset described by the config.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let dataset = synthetic_dataset(t.dataset_size, t.cloud_points, t.noise, t.data_seed)?;
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: RunConfig, dataset: Vec<PointCloud<T>>) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        let model = PcpMae::new(config.model.clone(), config.train.seed)?;
        let optim = OptimState::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        Ok(Trainer {
            adamw: AdamW {
                weight_decay: config.train.weight_decay,
                ..AdamW::default()
            },
            config,
            model,
            optim,
            rng,
            dataset,
        })
    }

    pub fn dataset(&self) -> &[PointCloud<T>] {
        &self.dataset
    }

    /// Number of optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.config.train.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.train.epochs * self.steps_per_epoch()) as u64
    }

    /// Warmup length, capped so very short runs still reach the decay phase.
    pub fn warmup_steps(&self) -> u64 {
        let w = (self.config.train.warmup_epochs * self.steps_per_epoch()) as u64;
        w.min(self.total_steps().saturating_sub(1))
    }

    pub fn current_epoch(&self) -> usize {
        self.optim.step as usize / self.steps_per_epoch()
    }

    pub fn is_finished(&self) -> bool {
        self.optim.step >= self.total_steps()
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(2 + epoch as u64);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn next_batch(&mut self) -> Result<Batch<T>> {
        let spe = self.steps_per_epoch();
        let step = self.optim.step as usize;
        let order = self.epoch_order(step / spe);
        let bs = self.config.train.batch_size;
        let start = (step % spe) * bs;
        let clouds: Vec<&PointCloud<T>> = order[start..(start + bs).min(order.len())]
            .iter()
            .map(|&i| &self.dataset[i])
            .collect();
        let t = &self.config.train;
        make_batch(
            &clouds,
            &self.config,
            &t.augmentations,
            t.mask_ratio,
            &mut self.rng,
        )
    }

    /// One pre-training step.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_finished() {
            return Err(Error::contract(format!(
                "training already ran {} steps",
                self.optim.step
            )));
        }
        let step = self.optim.step;
        let epoch = self.current_epoch();
        let batch = self.next_batch()?;
        let mut tape = Tape::new();
        let out = pretrain_forward(&self.model, &mut tape, &batch, &self.config.train)?;
        let value = |v: Var| tape.value(v).item().to_f64().unwrap_or(f64::NAN);
        let (loss, loss_pc, loss_recon) =
            (value(out.loss), value(out.loss_pc), value(out.loss_recon));
        let mut grads = tape.backward(out.loss)?.for_store(&self.model.store);
        let grad_norm = clip_grad_norm(&mut grads, self.config.train.grad_clip);
        if !(loss.is_finite() && grad_norm.is_finite()) {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "loss {loss}, loss_pc {loss_pc}, loss_recon {loss_recon}, grad norm {grad_norm}, labels {:?}",
                    batch.labels
                ),
            });
        }
        let t = &self.config.train;
        let lr = cosine_lr(
            step,
            self.total_steps(),
            self.warmup_steps(),
            t.lr,
            t.min_lr,
        )?;
        self.adamw
            .step(&mut self.model.store, &grads, &mut self.optim, lr)?;
        Ok(StepReport {
            step,
            epoch,
            loss,
            loss_pc,
            loss_recon,
            lr,
            grad_norm,
            visible: batch.num_visible(),
            masked: batch.num_masked(),
        })
    }

    /// Runs the remaining steps of the current epoch.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        self.run_epoch_with(|_| {})
    }

    /// Like [`Trainer::run_epoch`], calling `on_step` after every step.
    pub fn run_epoch_with(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<EpochReport> {
        let epoch = self.current_epoch();
        let mut reports = Vec::new();
        while !self.is_finished() && self.current_epoch() == epoch {
            let r = self.step()?;
            on_step(&r);
            reports.push(r);
        }
        Ok(EpochReport::from_steps(epoch, &reports))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let named = |tensors: &[Tensor<T>]| {
            self.model
                .store
                .iter()
                .zip(tensors)
                .map(|((_, name, _), t)| (name.to_string(), t.cast()))
                .collect()
        };
        Checkpoint {
            config: self.config.clone(),
            step: self.optim.step,
            params: self
                .model
                .store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.cast()))
                .collect(),
            first: named(&self.optim.first),
            second: named(&self.optim.second),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    /// Rebuilds the trainer saved in `ckpt`; the dataset is regenerated from
    /// the stored config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(ckpt.config.clone())?;
        ckpt.load_params(&mut trainer.model)?;
        trainer.optim.step = ckpt.step;
        for (slot, list) in [
            (&mut trainer.optim.first, &ckpt.first),
            (&mut trainer.optim.second, &ckpt.second),
        ] {
            if list.len() != slot.len() {
                return Err(Error::Format(format!(
                    "{} moment tensors, model has {}",
                    list.len(),
                    slot.len()
                )));
            }
            for (dst, (name, src)) in slot.iter_mut().zip(list) {
                if dst.shape() != src.shape() {
                    return Err(Error::Format(format!(
                        "moment {name}: shape {:?} vs {:?}",
                        src.shape(),
                        dst.shape()
                    )));
                }
                *dst = src.cast();
            }
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        trainer.rng = rng;
        Ok(trainer)
    }
}
