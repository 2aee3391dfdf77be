use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{MetricRow, RunManifest};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_l2, synthetic_dataset, write_ply, PointCloud};
use crate::model::PcpMae;
use crate::tensorcore::{clip_grad_norm, cosine_lr, AdamW, OptimState, Tape, Var};
use crate::training::{loss_recon, make_batch, Batch, RunConfig};

pub const GT_COLOR: [u8; 3] = [170, 170, 170];
pub const RECON_COLOR: [u8; 3] = [220, 60, 40];
pub const VISIBLE_COLOR: [u8; 3] = [40, 110, 220];

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageReport {
    pub final_chamfer: f64,
    /// Chamfer of predicting every patch point at its center.
    pub baseline_chamfer: f64,
}

/// Decoder-only reconstruction with every patch masked: the decoder sees
/// the mask token plus the true positional embedding of each center.
fn decode(model: &PcpMae<f32>, tape: &mut Tape<f32>, batch: &Batch<f32>) -> Result<Var> {
    let centers = tape.constant(batch.centers.clone());
    let pe = model.center_pe(tape, centers)?;
    let h = model.decoder_forward(tape, None, pe)?;
    model.reconstruction_head(tape, h)
}

/// Mean per-patch Chamfer of the model and of the center-only baseline.
fn evaluate(model: &PcpMae<f32>, batches: &[Batch<f32>]) -> Result<LeakageReport> {
    let (mut model_sum, mut base_sum, mut patches) = (0.0, 0.0, 0usize);
    for batch in batches {
        let mut tape = Tape::new();
        let rec = decode(model, &mut tape, batch)?;
        let pred = tape.value(rec).data();
        let k = model.config.patch_size;
        for (i, set) in batch.patch_sets.iter().enumerate() {
            for p in 0..set.num_patches() {
                let gt: Vec<[f64; 3]> = set.patch(p).iter().map(|q| q.map(f64::from)).collect();
                let offset = (i * set.num_patches() + p) * k * 3;
                let guess: Vec<[f64; 3]> = pred[offset..offset + k * 3]
                    .chunks(3)
                    .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                    .collect();
                model_sum += chamfer_l2(&guess, &gt)?;
                base_sum += chamfer_l2(&[[0.0; 3]], &gt)?;
                patches += 1;
            }
        }
    }
    Ok(LeakageReport {
        final_chamfer: model_sum / patches as f64,
        baseline_chamfer: base_sum / patches as f64,
    })
}

fn export(
    model: &PcpMae<f32>,
    batch: &Batch<f32>,
    index: usize,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let mut tape = Tape::new();
    let rec = decode(model, &mut tape, batch)?;
    let pred = tape.value(rec).data();
    let set = &batch.patch_sets[0];
    let k = model.config.patch_size;
    let mut points = Vec::with_capacity(set.num_patches() * k);
    for (p, c) in set.centers.iter().enumerate() {
        for j in 0..k {
            let o = (p * k + j) * 3;
            points.push([c[0] + pred[o], c[1] + pred[o + 1], c[2] + pred[o + 2]]);
        }
    }
    let gt = &batch.clouds[0];
    let recon = PointCloud::new(points)?;
    let gt_path = out.join(format!("shape{index:02}_gt.ply"));
    let rec_path = out.join(format!("shape{index:02}_recon.ply"));
    write_ply(gt, &gt_path, Some(&vec![GT_COLOR; gt.len()]))?;
    write_ply(&recon, &rec_path, Some(&vec![RECON_COLOR; recon.len()]))?;
    manifest.add_output(&gt_path);
    manifest.add_output(&rec_path);
    Ok(())
}

/// Trains only the PEM, mask token, decoder and head at mask ratio 1 and
/// compares the result with the center-only baseline. Exports the first
/// `exports` shapes as ground-truth / reconstruction PLY pairs.
pub fn run_leakage(
    mut config: RunConfig,
    out: &Path,
    exports: usize,
    mut on_epoch: impl FnMut(&MetricRow),
) -> Result<(RunManifest, LeakageReport)> {
    config.train.mask_ratio = 1.0;
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("leakage", &config, config.train.seed);
    let t = config.train.clone();
    let dataset = synthetic_dataset::<f32>(t.dataset_size, t.cloud_points, t.noise, t.data_seed)?;
    let mut model = PcpMae::<f32>::new(config.model.clone(), t.seed)?;
    let mut used = vec![false; model.store.len()];
    let ids = model
        .pem
        .params()
        .into_iter()
        .chain([model.mask_token])
        .chain(model.decoder.iter().flat_map(|b| b.params()))
        .chain(model.decoder_norm.params())
        .chain(model.head.params());
    ids.for_each(|id| used[id.0] = true);
    let adamw = AdamW {
        weight_decay: t.weight_decay,
        ..AdamW::default()
    };
    let mut state = OptimState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(1);
    let spe = dataset.len().div_ceil(t.batch_size);
    let total = (t.epochs * spe) as u64;
    let warmup = ((t.warmup_epochs * spe) as u64).min(total.saturating_sub(1));
    for epoch in 0..t.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut lr, mut visible, mut masked) = (0.0, 0.0, 0, 0);
        for chunk in order.chunks(t.batch_size) {
            let clouds: Vec<_> = chunk.iter().map(|&i| &dataset[i]).collect();
            let batch = make_batch(&clouds, &config, &t.augmentations, 1.0, &mut rng)?;
            (visible, masked) = (batch.num_visible(), batch.num_masked());
            let gt = batch.masked_patches().expect("every patch is masked");
            let mut tape = Tape::new();
            let rec = decode(&model, &mut tape, &batch)?;
            let loss = loss_recon(&mut tape, rec, &gt)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: state.step,
                    detail: format!("leakage loss {value} in epoch {}", epoch + 1),
                });
            }
            sum += value;
            let mut grads = tape.backward(loss)?.for_store(&model.store);
            clip_grad_norm(&mut grads, t.grad_clip);
            lr = cosine_lr(state.step, total, warmup, t.lr, t.min_lr)?;
            adamw.step_where(&mut model.store, &grads, &mut state, lr, |id| used[id.0])?;
        }
        let row = MetricRow {
            epoch: epoch + 1,
            loss: sum / spe as f64,
            loss_pc: 0.0,
            loss_recon: sum / spe as f64,
            lr,
            visible,
            masked,
            accuracy: None,
        };
        on_epoch(&row);
        manifest.push(row)?;
        manifest.flush_partial(out)?;
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(t.seed);
    eval_rng.set_stream(5);
    let batches = dataset
        .chunks(t.batch_size)
        .map(|chunk| {
            make_batch(
                &chunk.iter().collect::<Vec<_>>(),
                &config,
                &[],
                1.0,
                &mut eval_rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&model, &batches)?;
    for (i, cloud) in dataset.iter().take(exports).enumerate() {
        let single = make_batch(&[cloud], &config, &[], 1.0, &mut eval_rng)?;
        export(&model, &single, i, out, &mut manifest)?;
    }
    manifest.set("final_chamfer", report.final_chamfer);
    manifest.set("baseline_chamfer", report.baseline_chamfer);
    manifest.set("ratio", report.final_chamfer / report.baseline_chamfer);
    manifest.finish(out)?;
    Ok((manifest, report))
}
