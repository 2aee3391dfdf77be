use rand::Rng;

use super::config::RunConfig;
use super::mask::{mask_split, MaskSplit};
use crate::error::{Error, Result};
use crate::geometry::{augment, fps, knn_group, Augmentation, PatchSet, PointCloud};
use crate::scalar::Scalar;
use crate::tensorcore::Tensor;

/// Patchified clouds ready for a forward pass.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// Normalized patches `[B, n, k, 3]`.
    pub patches: Tensor<T>,
    /// Patch centers `[B, n, 3]`.
    pub centers: Tensor<T>,
    pub splits: Vec<MaskSplit>,
    pub labels: Vec<Option<usize>>,
    /// The sampled clouds the patches were cut from.
    pub clouds: Vec<PointCloud<T>>,
    pub patch_sets: Vec<PatchSet<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.splits.first().map_or(0, |s| s.masked.len())
    }

    pub fn num_visible(&self) -> usize {
        self.splits.first().map_or(0, |s| s.visible.len())
    }

    pub fn visible_index(&self) -> Vec<Vec<usize>> {
        self.splits.iter().map(|s| s.visible.clone()).collect()
    }

    pub fn masked_index(&self) -> Vec<Vec<usize>> {
        self.splits.iter().map(|s| s.masked.clone()).collect()
    }

    /// Ground-truth masked patches `[B * nm, k, 3]`, or `None` when nothing
    /// is masked.
    pub fn masked_patches(&self) -> Option<Tensor<T>> {
        let nm = self.num_masked();
        if nm == 0 {
            return None;
        }
        let k = self.patch_sets[0].k;
        let mut data = Vec::with_capacity(self.len() * nm * k * 3);
        for (set, split) in self.patch_sets.iter().zip(&self.splits) {
            for &i in &split.masked {
                data.extend(set.patch(i).iter().flatten());
            }
        }
        Some(Tensor::new(&[self.len() * nm, k, 3], data).expect("consistent patch sizes"))
    }

    /// Centers of the masked patches `[B, nm, 3]`.
    pub fn masked_centers(&self) -> Option<Tensor<T>> {
        let nm = self.num_masked();
        if nm == 0 {
            return None;
        }
        let data = self
            .patch_sets
            .iter()
            .zip(&self.splits)
            .flat_map(|(set, split)| split.masked.iter().flat_map(move |&i| set.centers[i]))
            .collect();
        Some(Tensor::new(&[self.len(), nm, 3], data).expect("consistent center counts"))
    }
}

/// Farthest-point subsample to `num_points`, then FPS centers and KNN
/// patches.
pub fn patchify<T: Scalar, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    num_points: usize,
    num_patches: usize,
    patch_size: usize,
    rng: &mut R,
) -> Result<(PointCloud<T>, PatchSet<T>)> {
    if cloud.len() < num_points {
        return Err(Error::Config(format!(
            "cloud has {} points, model samples {num_points}",
            cloud.len()
        )));
    }
    let sampled = if cloud.len() == num_points {
        cloud.clone()
    } else {
        cloud.select(&fps(cloud, num_points, rng)?)
    };
    let centers = fps(&sampled, num_patches, rng)?;
    let set = knn_group(&sampled, &centers, patch_size)?;
    Ok((sampled, set))
}

/// Augments, patchifies and masks each cloud in order, drawing all
/// randomness from `rng`.
pub fn make_batch<T: Scalar, R: Rng + ?Sized>(
    clouds: &[&PointCloud<T>],
    config: &RunConfig,
    augmentations: &[Augmentation],
    mask_ratio: f64,
    rng: &mut R,
) -> Result<Batch<T>> {
    let m = &config.model;
    let (n, k) = (m.num_patches, m.patch_size);
    let mut patches = Vec::with_capacity(clouds.len() * n * k * 3);
    let mut centers = Vec::with_capacity(clouds.len() * n * 3);
    let mut batch = Batch {
        patches: Tensor::zeros(&[1]),
        centers: Tensor::zeros(&[1]),
        splits: Vec::new(),
        labels: Vec::new(),
        clouds: Vec::new(),
        patch_sets: Vec::new(),
    };
    for cloud in clouds {
        let aug = augment(cloud, augmentations, rng);
        let (sampled, set) = patchify(&aug, m.num_points, n, k, rng)?;
        patches.extend(set.patches.iter().flatten());
        centers.extend(set.centers.iter().flatten());
        batch.splits.push(mask_split(n, mask_ratio, rng));
        batch.labels.push(cloud.label);
        batch.clouds.push(sampled);
        batch.patch_sets.push(set);
    }
    batch.patches = Tensor::new(&[clouds.len(), n, k, 3], patches)?;
    batch.centers = Tensor::new(&[clouds.len(), n, 3], centers)?;
    Ok(batch)
}
