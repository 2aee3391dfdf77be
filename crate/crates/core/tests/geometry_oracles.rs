//! Geometry routines against independent brute-force oracles.

mod common;

use common::oracles::{chamfer_oracle, d2, fps_oracle, knn_oracle, random_cloud};
use pcpmae::geometry::{chamfer_l2, fps_from, knn_group, PointCloud, ScaleTranslate};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn fps_knn_chamfer_match_oracles_on_random_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let p = rng.random_range(2..=64);
        let pts = random_cloud(&mut rng, p);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let n = rng.random_range(1..=p);
        let first = rng.random_range(0..p);
        let picks = fps_from(&cloud, n, first).unwrap();
        assert_eq!(picks, fps_oracle(&pts, n, first));

        let k = rng.random_range(1..=p);
        let set = knn_group(&cloud, &picks, k).unwrap();
        for (c, &ci) in picks.iter().enumerate() {
            assert_eq!(
                &set.members[c * k..(c + 1) * k],
                knn_oracle(&pts, ci, k).as_slice()
            );
        }

        let q_len = rng.random_range(1..=64);
        let q = random_cloud(&mut rng, q_len);
        let got = chamfer_l2(&pts, &q).unwrap();
        let want = chamfer_oracle(&pts, &q);
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-300));
    }
}

#[test]
fn knn_on_six_points() {
    let pts = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 2.0, 0.0],
        [5.0, 5.0, 5.0],
        [5.0, 4.0, 5.0],
        [0.5, 0.5, 0.0],
    ];
    let cloud = PointCloud::new(pts.clone()).unwrap();
    let set = knn_group(&cloud, &[0, 3], 3).unwrap();
    assert_eq!(&set.members[..3], &[0, 5, 1]);
    assert_eq!(&set.members[3..], &[3, 4, 2]);
    assert_eq!(set.patch(1)[1], [0.0, -1.0, 0.0]);
}

#[test]
fn golden_scale_translate_for_seed_42() {
    let t = ScaleTranslate::sample(&mut ChaCha8Rng::seed_from_u64(42));
    assert_eq!(
        t.scale,
        [1.2349134935888928, 1.0229303357137665, 0.9071615659509855]
    );
    assert_eq!(
        t.shift,
        [
            0.18011016306899358,
            0.050944208478936104,
            -0.14001645188387002
        ]
    );
}

proptest! {
    #[test]
    fn fps_coverage_never_grows(seed in 0u64..500, p in 3usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_cloud(&mut rng, p);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let picks = fps_from(&cloud, p, 0).unwrap();
        let coverage = |n: usize| {
            pts.iter().map(|q| picks[..n].iter().map(|&c| d2(q, &pts[c])).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
        };
        for n in 2..p {
            prop_assert!(coverage(n + 1) <= coverage(n));
        }
    }

    #[test]
    fn patches_recover_source_points(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_cloud(&mut rng, 32);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let set = knn_group(&cloud, &fps_from(&cloud, 6, 0).unwrap(), 5).unwrap();
        for c in 0..6 {
            for j in 0..5 {
                let rel = set.patch(c)[j];
                let src = pts[set.members[c * 5 + j]];
                for a in 0..3 {
                    prop_assert_eq!(rel[a] + set.centers[c][a], src[a]);
                }
            }
        }
    }

    #[test]
    fn chamfer_nonnegative_and_zero_on_equal_sets(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_cloud(&mut rng, 10);
        let b = random_cloud(&mut rng, 7);
        prop_assert!(chamfer_l2(&a, &b).unwrap() >= 0.0);
        let mut shuffled = a.clone();
        shuffled.reverse();
        prop_assert_eq!(chamfer_l2(&a, &shuffled).unwrap(), 0.0);
    }
}
