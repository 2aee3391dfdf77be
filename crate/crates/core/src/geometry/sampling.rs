use std::cmp::Ordering;

use rand::Rng;

use super::{sq_dist, Point, PointCloud};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Greedy farthest-point sampling. The first index is drawn uniformly from
/// `rng`; see [`fps_from`] for the deterministic core.
pub fn fps<T: Scalar, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 || n > cloud.len() {
        return Err(Error::contract(format!(
            "fps: cannot pick {n} of {} points",
            cloud.len()
        )));
    }
    let first = rng.random_range(0..cloud.len());
    fps_from(cloud, n, first)
}

/// Farthest-point sampling starting at `first`. Each further pick maximizes
/// the squared distance to the nearest already-chosen point, ties going to
/// the lowest index.
pub fn fps_from<T: Scalar>(cloud: &PointCloud<T>, n: usize, first: usize) -> Result<Vec<usize>> {
    let p = cloud.len();
    if n == 0 || n > p || first >= p {
        return Err(Error::contract(format!(
            "fps: cannot pick {n} of {p} points from index {first}"
        )));
    }
    let pts = &cloud.points;
    let mut chosen = Vec::with_capacity(n);
    let mut nearest = vec![T::infinity(); p];
    let mut current = first;
    for _ in 0..n {
        chosen.push(current);
        nearest[current] = T::neg_infinity();
        let c = pts[current];
        let mut best = (T::neg_infinity(), 0);
        for (i, (pt, d)) in pts.iter().zip(nearest.iter_mut()).enumerate() {
            let dist = sq_dist(pt, &c);
            if dist < *d {
                *d = dist;
            }
            if *d > best.0 {
                best = (*d, i);
            }
        }
        current = best.1;
    }
    Ok(chosen)
}

/// Patches of `k` nearest neighbours around each center, expressed relative
/// to their center.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T> {
    pub centers: Vec<Point<T>>,
    /// `n * k` center-relative points, patch-major, nearest first.
    pub patches: Vec<Point<T>>,
    pub center_indices: Vec<usize>,
    /// Source index of every patch point, aligned with `patches`.
    pub members: Vec<usize>,
    pub k: usize,
}

impl<T: Scalar> PatchSet<T> {
    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn patch(&self, i: usize) -> &[Point<T>] {
        &self.patches[i * self.k..(i + 1) * self.k]
    }
}

/// Groups the `k` nearest points (the center included) around each center.
/// Ties are broken by lowest source index.
pub fn knn_group<T: Scalar>(
    cloud: &PointCloud<T>,
    centers: &[usize],
    k: usize,
) -> Result<PatchSet<T>> {
    let p = cloud.len();
    if k == 0 || k > p {
        return Err(Error::contract(format!("knn: k = {k} with {p} points")));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= p) {
        return Err(Error::contract(format!(
            "knn: center index {bad} out of range"
        )));
    }
    let pts = &cloud.points;
    let by_dist = |a: &(T, usize), b: &(T, usize)| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
    };
    let mut patches = Vec::with_capacity(centers.len() * k);
    let mut members = Vec::with_capacity(centers.len() * k);
    let mut dists: Vec<(T, usize)> = Vec::with_capacity(p);
    for &ci in centers {
        let c = pts[ci];
        dists.clear();
        dists.extend(pts.iter().enumerate().map(|(i, pt)| (sq_dist(pt, &c), i)));
        if k < p {
            dists.select_nth_unstable_by(k - 1, by_dist);
        }
        let nearest = &mut dists[..k];
        nearest.sort_unstable_by(by_dist);
        for &(_, i) in nearest.iter() {
            let q = pts[i];
            patches.push([q[0] - c[0], q[1] - c[1], q[2] - c[2]]);
            members.push(i);
        }
    }
    Ok(PatchSet {
        centers: centers.iter().map(|&i| pts[i]).collect(),
        patches,
        center_indices: centers.to_vec(),
        members,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> PointCloud<f64> {
        PointCloud::new((0..n).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn fps_colinear() {
        let picks = fps_from(&line(5), 3, 0).unwrap();
        assert_eq!(picks, vec![0, 4, 2]);
    }

    #[test]
    fn fps_exhausts_all_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut picks = fps(&line(6), 6, &mut rng).unwrap();
        picks.sort_unstable();
        assert_eq!(picks, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn fps_single_pick_is_seeded_first() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let expected = b.random_range(0..7);
        assert_eq!(fps(&line(7), 1, &mut a).unwrap(), vec![expected]);
    }

    #[test]
    fn fps_rejects_oversampling() {
        assert!(fps_from(&line(3), 4, 0).is_err());
    }

    #[test]
    fn knn_single_neighbour_is_origin() {
        let set = knn_group(&line(5), &[1, 3], 1).unwrap();
        assert_eq!(set.patches, vec![[0.0; 3], [0.0; 3]]);
    }

    #[test]
    fn knn_all_points_shifted() {
        let cloud = line(4);
        let set = knn_group(&cloud, &[2], 4).unwrap();
        let mut shifted: Vec<f64> = set.patches.iter().map(|p| p[0]).collect();
        shifted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(shifted, vec![-2.0, -1.0, 0.0, 1.0]);
        // equidistant neighbours 1 and 3: lower index first
        assert_eq!(set.members, vec![2, 1, 3, 0]);
    }

    #[test]
    fn knn_rejects_large_k() {
        assert!(knn_group(&line(3), &[0], 4).is_err());
    }
}
