use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{make_batch, Batch};
use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{Augmentation, PointCloud};
use crate::model::PcpMae;
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensorcore::{clip_grad_norm, cosine_lr, AdamW, OptimState, ParamId, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub grad_clip: f64,
    pub hidden: usize,
    /// Train only the classification head.
    pub frozen: bool,
    pub augmentations: Vec<Augmentation>,
    pub train_size: usize,
    pub test_size: usize,
    pub cloud_points: usize,
    pub noise: f64,
    pub train_data_seed: u64,
    pub test_data_seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            batch_size: 16,
            lr: 5e-4,
            min_lr: 1e-6,
            weight_decay: 0.05,
            warmup_epochs: 2,
            grad_clip: 10.0,
            hidden: 128,
            frozen: false,
            augmentations: vec![Augmentation::ScaleTranslate],
            train_size: 160,
            test_size: 160,
            cloud_points: 2048,
            noise: 0.01,
            train_data_seed: 4321,
            test_data_seed: 8765,
        }
    }
}

/// Encoder plus a two-layer head on `concat(mean, max)` of the output tokens.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub model: PcpMae<T>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub classes: usize,
    /// First head parameter; everything before it belongs to the backbone.
    pub head_start: ParamId,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(mut model: PcpMae<T>, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let d = model.config.dim;
        let head_start = ParamId(model.store.len());
        let fc1 = Linear::new(
            &mut model.store,
            "cls_head.fc1",
            2 * d,
            hidden,
            true,
            &mut rng,
        )?;
        let fc2 = Linear::new(
            &mut model.store,
            "cls_head.fc2",
            hidden,
            classes,
            true,
            &mut rng,
        )?;
        Ok(Classifier {
            model,
            fc1,
            fc2,
            classes,
            head_start,
        })
    }

    /// Logits `[B, classes]` with every patch visible.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch<T>) -> Result<Var> {
        let m = &self.model;
        let patches = tape.constant(batch.patches.clone());
        let centers = tape.constant(batch.centers.clone());
        let e = m.embed(tape, patches)?;
        let pe = m.center_pe(tape, centers)?;
        let tokens = m
            .joint_forward(tape, Some((e, pe)), None)?
            .visible
            .expect("visible tokens");
        let mean = tape.mean_axis(tokens, 1)?;
        let max = tape.max_axis(tokens, 1)?;
        let f = tape.concat(&[mean, max], 1)?;
        let h = self.fc1.forward(tape, &m.store, f)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, &m.store, h)
    }

    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, batch)?;
        let v = tape.value(logits);
        Ok(v.data()
            .chunks(self.classes)
            .map(|row| (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best }))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub seed: u64,
    /// Held-out accuracy before any update.
    pub initial_accuracy: f64,
    pub accuracy: f64,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
}

fn labels<T>(set: &[PointCloud<T>], classes: usize) -> Result<Vec<usize>> {
    set.iter()
        .map(|c| match c.label {
            Some(l) if l < classes => Ok(l),
            other => Err(Error::Config(format!(
                "label {other:?} outside {classes} classes"
            ))),
        })
        .collect()
}

/// Fine-tunes `backbone` (pre-trained or fresh) with a new head and reports
/// held-out accuracy. Test batches are fixed and unaugmented.
pub fn finetune_classifier<T: Scalar>(
    backbone: PcpMae<T>,
    run: &RunConfig,
    train_set: &[PointCloud<T>],
    test_set: &[PointCloud<T>],
    classes: usize,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    if train_set.is_empty() || test_set.is_empty() || classes == 0 {
        return Err(Error::Config(
            "fine-tuning needs non-empty sets and at least one class".into(),
        ));
    }
    let train_labels = labels(train_set, classes)?;
    let test_labels = labels(test_set, classes)?;
    let mut clf = Classifier::new(backbone, config.hidden, classes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);

    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.test_data_seed);
    let test_batches = test_set
        .chunks(config.batch_size)
        .map(|chunk| {
            make_batch(
                &chunk.iter().collect::<Vec<_>>(),
                run,
                &[],
                0.0,
                &mut eval_rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let accuracy = |clf: &Classifier<T>| -> Result<f64> {
        let mut correct = 0;
        let mut seen = 0;
        for b in &test_batches {
            for p in clf.predict(b)? {
                correct += usize::from(p == test_labels[seen]);
                seen += 1;
            }
        }
        Ok(correct as f64 / seen as f64)
    };
    let initial_accuracy = accuracy(&clf)?;

    let adamw = AdamW {
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    let mut state = OptimState::new(&clf.model.store);
    let spe = train_set.len().div_ceil(config.batch_size);
    let total = (config.epochs * spe) as u64;
    let warmup = ((config.warmup_epochs * spe) as u64).min(total.saturating_sub(1));
    let head_start = clf.head_start.0;
    let mut train_loss = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let clouds: Vec<&PointCloud<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = make_batch(&clouds, run, &config.augmentations, 0.0, &mut rng)?;
            let ys: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let mut tape = Tape::new();
            let logits = clf.forward(&mut tape, &batch)?;
            let loss = tape.cross_entropy(logits, &ys)?;
            let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: state.step,
                    detail: format!("fine-tune loss {value}"),
                });
            }
            sum += value;
            let mut grads = tape.backward(loss)?.for_store(&clf.model.store);
            clip_grad_norm(&mut grads, config.grad_clip);
            let lr = cosine_lr(state.step, total, warmup, config.lr, config.min_lr)?;
            if config.frozen {
                adamw.step_where(&mut clf.model.store, &grads, &mut state, lr, |id| {
                    id.0 >= head_start
                })?;
            } else {
                adamw.step(&mut clf.model.store, &grads, &mut state, lr)?;
            }
        }
        train_loss.push(sum / spe as f64);
    }
    Ok(FinetuneReport {
        seed,
        initial_accuracy,
        accuracy: accuracy(&clf)?,
        train_loss,
    })
}
