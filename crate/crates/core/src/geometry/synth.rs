use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Synthetic primitive families; the discriminant is the class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    Helix,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Plane,
        ShapeKind::Helix,
        ShapeKind::Cross,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
            ShapeKind::Helix => "helix",
            ShapeKind::Cross => "cross",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape kind {s:?}")))
    }
}

const CYLINDER_RADIUS: f64 = 0.6;
const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.3;
const HELIX_RADIUS: f64 = 0.8;
const HELIX_TUBE: f64 = 0.08;
const HELIX_TURNS: f64 = 2.0;
const CROSS_HALF_WIDTH: f64 = 0.2;

/// Uniform surface samples of a primitive that fits in [-1, 1]³, plus
/// optional isotropic Gaussian noise.
pub fn gen_synthetic_shape<T: Scalar>(
    kind: ShapeKind,
    n_points: usize,
    noise: f64,
    seed: u64,
) -> Result<PointCloud<T>> {
    if n_points < 8 {
        return Err(Error::contract(format!(
            "synthetic shape needs >= 8 points, got {n_points}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::contract(format!(
            "noise sigma must be >= 0, got {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let points = (0..n_points)
        .map(|_| {
            let p = sample_surface(kind, &mut rng);
            let p = if noise > 0.0 {
                [
                    p[0] + normal.sample(&mut rng),
                    p[1] + normal.sample(&mut rng),
                    p[2] + normal.sample(&mut rng),
                ]
            } else {
                p
            };
            p.map(T::lit)
        })
        .collect();
    PointCloud::with_label(points, Some(kind.label()))
}

/// Balanced labelled set cycling through every kind. Each cloud gets a
/// random vertical rotation and anisotropic shrink so instances differ.
pub fn synthetic_dataset<T: Scalar>(
    count: usize,
    n_points: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<PointCloud<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            let cloud = gen_synthetic_shape::<f64>(kind, n_points, noise, rng.random())?;
            let shrink: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.0));
            let rot = super::Rotation::sample(&mut rng);
            let shaped = PointCloud {
                points: cloud
                    .points
                    .iter()
                    .map(|p| [p[0] * shrink[0], p[1] * shrink[1], p[2] * shrink[2]])
                    .collect(),
                label: cloud.label,
            };
            Ok(rot.apply(&shaped).cast())
        })
        .collect()
}

fn sample_surface<R: Rng>(kind: ShapeKind, rng: &mut R) -> Point<f64> {
    match kind {
        ShapeKind::Sphere => loop {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 && n <= 1.0 {
                break v.map(|c| c / n);
            }
        },
        ShapeKind::Cube => {
            let face = rng.random_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            p[axis] = sign;
            p
        }
        ShapeKind::Cylinder => {
            let r = CYLINDER_RADIUS;
            let side = TAU * r * 2.0;
            let caps = 2.0 * PI * r * r;
            let theta = rng.random_range(0.0..TAU);
            if rng.random_range(0.0..side + caps) < side {
                [
                    r * theta.cos(),
                    rng.random_range(-1.0..1.0),
                    r * theta.sin(),
                ]
            } else {
                let rho = r * rng.random::<f64>().sqrt();
                let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                [rho * theta.cos(), y, rho * theta.sin()]
            }
        }
        ShapeKind::Cone => {
            // apex at y = 1, unit base disk at y = -1
            let slant = (1.0f64 + 4.0).sqrt();
            let lateral = PI * slant;
            let base = PI;
            let theta = rng.random_range(0.0..TAU);
            let u: f64 = rng.random::<f64>().sqrt();
            if rng.random_range(0.0..lateral + base) < lateral {
                [u * theta.cos(), 1.0 - 2.0 * u, u * theta.sin()]
            } else {
                [u * theta.cos(), -1.0, u * theta.sin()]
            }
        }
        ShapeKind::Torus => {
            let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
            let v = loop {
                let v = rng.random_range(0.0..TAU);
                if rng.random_range(0.0..big + small) < big + small * v.cos() {
                    break v;
                }
            };
            let u = rng.random_range(0.0..TAU);
            let ring = big + small * v.cos();
            [ring * u.cos(), small * v.sin(), ring * u.sin()]
        }
        ShapeKind::Plane => [
            rng.random_range(-1.0..1.0),
            0.0,
            rng.random_range(-1.0..1.0),
        ],
        ShapeKind::Helix => {
            let t = rng.random_range(0.0..HELIX_TURNS * TAU);
            let phi = rng.random_range(0.0..TAU);
            let (c, s) = (t.cos(), t.sin());
            let y = (1.0 - HELIX_TUBE) * (2.0 * t / (HELIX_TURNS * TAU) - 1.0);
            let radial = HELIX_RADIUS + HELIX_TUBE * phi.cos();
            [radial * c, y + HELIX_TUBE * phi.sin(), radial * s]
        }
        ShapeKind::Cross => loop {
            // surfaces of two orthogonal bars, minus the parts inside the other bar
            let w = CROSS_HALF_WIDTH;
            let horizontal = rng.random_bool(0.5);
            let long = if horizontal { 0 } else { 1 };
            let face = rng.random_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (a, c) in p.iter_mut().enumerate() {
                let half = if a == long { 1.0 } else { w };
                *c = if a == axis {
                    sign * half
                } else {
                    rng.random_range(-half..half)
                };
            }
            // area weighting: long faces are 1/w times larger than end caps
            let area = if axis == long { w * w } else { w };
            if rng.random_range(0.0..w) >= area {
                continue;
            }
            let inside_other = p[long].abs() < w && p[2].abs() < w;
            if !inside_other {
                break p;
            }
        },
    }
}
