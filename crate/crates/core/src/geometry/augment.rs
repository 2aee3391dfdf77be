use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::scalar::Scalar;

/// Pre-training augmentations, applied in list order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    ScaleTranslate,
    Rotate,
    Jitter,
    Flip,
}

/// Per-axis scale followed by per-axis shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleTranslate {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl ScaleTranslate {
    pub const IDENTITY: Self = ScaleTranslate {
        scale: [1.0; 3],
        shift: [0.0; 3],
    };

    /// Scale uniform in [2/3, 3/2], shift uniform in [-0.2, 0.2], per axis.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut t = Self::IDENTITY;
        for a in 0..3 {
            t.scale[a] = rng.random_range(2.0 / 3.0..1.5);
            t.shift[a] = rng.random_range(-0.2..0.2);
        }
        t
    }

    pub fn apply<T: Scalar>(&self, cloud: &PointCloud<T>) -> PointCloud<T> {
        map_points(cloud, |p| {
            let mut q = p;
            for a in 0..3 {
                q[a] = p[a] * T::lit(self.scale[a]) + T::lit(self.shift[a]);
            }
            q
        })
    }
}

/// Rotation about the vertical (y) axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    pub angle: f64,
}

impl Rotation {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Rotation {
            angle: rng.random_range(0.0..TAU),
        }
    }

    pub fn apply<T: Scalar>(&self, cloud: &PointCloud<T>) -> PointCloud<T> {
        let (s, c) = (T::lit(self.angle.sin()), T::lit(self.angle.cos()));
        map_points(cloud, |[x, y, z]| [c * x + s * z, y, -s * x + c * z])
    }
}

/// Clipped Gaussian noise on every coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub sigma: f64,
    pub clip: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            sigma: 0.01,
            clip: 0.05,
        }
    }
}

impl Jitter {
    pub fn apply<T: Scalar, R: Rng + ?Sized>(
        &self,
        cloud: &PointCloud<T>,
        rng: &mut R,
    ) -> PointCloud<T> {
        let normal = Normal::new(0.0, self.sigma).expect("sigma must be finite and non-negative");
        map_points(cloud, |p| {
            p.map(|c| c + T::lit(normal.sample(rng).clamp(-self.clip, self.clip)))
        })
    }
}

/// Mirror across the x axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flip {
    pub active: bool,
}

impl Flip {
    /// Flips with probability 0.5.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Flip {
            active: rng.random_bool(0.5),
        }
    }

    pub fn apply<T: Scalar>(&self, cloud: &PointCloud<T>) -> PointCloud<T> {
        if !self.active {
            return cloud.clone();
        }
        map_points(cloud, |[x, y, z]| [-x, y, z])
    }
}

/// Applies `augs` in order, drawing every random parameter from `rng`.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    augs: &[Augmentation],
    rng: &mut R,
) -> PointCloud<T> {
    let mut out = cloud.clone();
    for aug in augs {
        out = match aug {
            Augmentation::ScaleTranslate => ScaleTranslate::sample(rng).apply(&out),
            Augmentation::Rotate => Rotation::sample(rng).apply(&out),
            Augmentation::Jitter => Jitter::default().apply(&out, rng),
            Augmentation::Flip => Flip::sample(rng).apply(&out),
        };
    }
    out
}

fn map_points<T: Scalar>(
    cloud: &PointCloud<T>,
    mut f: impl FnMut([T; 3]) -> [T; 3],
) -> PointCloud<T> {
    PointCloud {
        points: cloud.points.iter().map(|&p| f(p)).collect(),
        label: cloud.label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sq_dist;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud() -> PointCloud<f64> {
        PointCloud::new(vec![
            [0.1, 0.2, 0.3],
            [-0.5, 0.9, 0.0],
            [0.7, -0.4, -0.8],
            [0.0, 0.0, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn identity_transforms() {
        let c = cloud();
        assert_eq!(ScaleTranslate::IDENTITY.apply(&c), c);
        assert_eq!(Rotation { angle: 0.0 }.apply(&c), c);
        assert_eq!(Flip { active: false }.apply(&c), c);
    }

    #[test]
    fn flip_is_involution() {
        let c = cloud();
        let f = Flip { active: true };
        assert_eq!(f.apply(&f.apply(&c)), c);
    }

    #[test]
    fn rotation_is_isometry() {
        let c = cloud();
        let r = Rotation { angle: 1.234 }.apply(&c);
        for i in 0..c.len() {
            for j in 0..c.len() {
                let (a, b) = (
                    sq_dist(&c.points[i], &c.points[j]).sqrt(),
                    sq_dist(&r.points[i], &r.points[j]).sqrt(),
                );
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scale_translate_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = ScaleTranslate::sample(&mut rng);
            assert!(t.scale.iter().all(|s| (2.0 / 3.0..1.5).contains(s)));
            assert!(t.shift.iter().all(|s| (-0.2..0.2).contains(s)));
        }
    }

    #[test]
    fn jitter_is_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j = Jitter {
            sigma: 1.0,
            clip: 0.05,
        };
        let c = cloud();
        let out = j.apply(&c, &mut rng);
        for (p, q) in c.points.iter().zip(&out.points) {
            for a in 0..3 {
                assert!((p[a] - q[a]).abs() <= 0.05 + 1e-15);
            }
        }
    }

    #[test]
    fn seeded_augment_reproducible_and_shape_preserving() {
        let augs = [
            Augmentation::ScaleTranslate,
            Augmentation::Rotate,
            Augmentation::Jitter,
            Augmentation::Flip,
        ];
        let a = augment(&cloud(), &augs, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&cloud(), &augs, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.points.iter().flatten().all(|c| c.is_finite()));
    }
}
