use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::leakage::{GT_COLOR, RECON_COLOR, VISIBLE_COLOR};
use super::manifest::RunManifest;
use crate::error::Result;
use crate::geometry::{write_ply, PointCloud};
use crate::model::PcpMae;
use crate::tensorcore::Tape;
use crate::training::{make_batch, pretrain_forward, RunConfig};

pub const INPUT_FILE: &str = "input.ply";
pub const VISIBLE_FILE: &str = "visible.ply";
pub const RECONSTRUCTION_FILE: &str = "reconstruction.ply";

/// Index of the nearest center for every point, lowest index on ties.
fn nearest_center(points: &[[f32; 3]], centers: &[[f32; 3]]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let d = |c: &[f32; 3]| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f32>();
            (0..centers.len()).fold(0, |best, i| {
                if d(&centers[i]) < d(&centers[best]) {
                    i
                } else {
                    best
                }
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub input: PointCloud<f32>,
    pub visible: PointCloud<f32>,
    /// Visible-region points followed by reconstructed masked regions.
    pub reconstruction: PointCloud<f32>,
    pub masked_points: usize,
}

/// Masks `cloud` and rebuilds it with `model`. Every sampled point belongs
/// to the region of its nearest center; a masked region of `r` points is
/// replaced by `r` predicted patch points (cycling the `k` predictions).
pub fn reconstruct(
    model: &PcpMae<f32>,
    run: &RunConfig,
    cloud: &PointCloud<f32>,
    mask_ratio: f64,
    seed: u64,
) -> Result<Reconstruction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = make_batch(&[cloud], run, &[], mask_ratio, &mut rng)?;
    let mut tape = Tape::new();
    let out = pretrain_forward(model, &mut tape, &batch, &run.train)?;
    let set = &batch.patch_sets[0];
    let sampled = &batch.clouds[0];
    let split = &batch.splits[0];
    let region = nearest_center(&sampled.points, &set.centers);
    let mut is_masked = vec![false; set.num_patches()];
    split.masked.iter().for_each(|&i| is_masked[i] = true);

    let visible: Vec<[f32; 3]> = sampled
        .points
        .iter()
        .zip(&region)
        .filter(|(_, &r)| !is_masked[r])
        .map(|(p, _)| *p)
        .collect();
    let mut rebuilt = visible.clone();
    if let Some(rec) = out.reconstruction {
        let pred = tape.value(rec).data();
        let k = set.k;
        for (slot, &patch) in split.masked.iter().enumerate() {
            let c = set.centers[patch];
            let size = region.iter().filter(|&&r| r == patch).count();
            for j in 0..size {
                let o = (slot * k + j % k) * 3;
                rebuilt.push([c[0] + pred[o], c[1] + pred[o + 1], c[2] + pred[o + 2]]);
            }
        }
    }
    let masked_points = rebuilt.len() - visible.len();
    Ok(Reconstruction {
        input: sampled.clone(),
        visible: PointCloud::new(visible).unwrap_or_else(|_| PointCloud {
            points: vec![],
            label: None,
        }),
        reconstruction: PointCloud::new(rebuilt)?,
        masked_points,
    })
}

/// Writes input, visible-only and reconstructed clouds as colored PLY files.
pub fn run_reconstruct(
    model: &PcpMae<f32>,
    run: &RunConfig,
    cloud: &PointCloud<f32>,
    mask_ratio: f64,
    seed: u64,
    out: &Path,
) -> Result<(RunManifest, Reconstruction)> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("reconstruct", run, seed);
    let r = reconstruct(model, run, cloud, mask_ratio, seed)?;
    let input = out.join(INPUT_FILE);
    write_ply(&r.input, &input, Some(&vec![GT_COLOR; r.input.len()]))?;
    let visible = out.join(VISIBLE_FILE);
    write_ply(
        &r.visible,
        &visible,
        Some(&vec![VISIBLE_COLOR; r.visible.len()]),
    )?;
    let rec = out.join(RECONSTRUCTION_FILE);
    let n_vis = r.reconstruction.len() - r.masked_points;
    let colors: Vec<[u8; 3]> = (0..r.reconstruction.len())
        .map(|i| {
            if i < n_vis {
                VISIBLE_COLOR
            } else {
                RECON_COLOR
            }
        })
        .collect();
    write_ply(&r.reconstruction, &rec, Some(&colors))?;
    for p in [&input, &visible, &rec] {
        manifest.add_output(p);
    }
    manifest.set("mask_ratio", mask_ratio);
    manifest.set("input_points", r.input.len());
    manifest.set("visible_points", r.visible.len());
    manifest.set("reconstruction_points", r.reconstruction.len());
    manifest.finish(out)?;
    Ok((manifest, r))
}
