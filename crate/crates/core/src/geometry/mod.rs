//! Point-cloud substrate: sampling and grouping, Chamfer distance,
//! augmentations, synthetic primitives and ASCII file formats.

mod augment;
mod chamfer;
mod io;
mod sampling;
mod synth;

pub use augment::{augment, Augmentation, Flip, Jitter, Rotation, ScaleTranslate};
pub use chamfer::chamfer_l2;
pub use io::{read_ply, read_xyz, write_ply, write_xyz, PlyCloud};
pub use sampling::{fps, fps_from, knn_group, PatchSet};
pub use synth::{gen_synthetic_shape, synthetic_dataset, ShapeKind};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Point<T> = [T; 3];

/// Unordered set of 3-D points with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    pub points: Vec<Point<T>>,
    pub label: Option<usize>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Point<T>>) -> Result<Self> {
        Self::with_label(points, None)
    }

    pub fn with_label(points: Vec<Point<T>>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("point cloud needs at least one point"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::contract("point cloud has non-finite coordinates"));
        }
        Ok(PointCloud { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
        }
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        let c = |x: T| U::lit(x.to_f64().unwrap_or(f64::NAN));
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [c(p[0]), c(p[1]), c(p[2])])
                .collect(),
            label: self.label,
        }
    }
}

#[inline]
pub(crate) fn sq_dist<T: Scalar>(a: &Point<T>, b: &Point<T>) -> T {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}
