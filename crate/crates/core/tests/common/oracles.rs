//! Brute-force geometry oracles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Greedy FPS written as "rescan everything each round".
pub fn fps_oracle(pts: &[[f64; 3]], n: usize, first: usize) -> Vec<usize> {
    let mut chosen = vec![first];
    while chosen.len() < n {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..pts.len() {
            if chosen.contains(&i) {
                continue;
            }
            let m = chosen
                .iter()
                .map(|&c| d2(&pts[i], &pts[c]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| m > bd) {
                best = Some((m, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

/// Full stable sort by (distance, index).
pub fn knn_oracle(pts: &[[f64; 3]], center: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| {
        d2(&pts[a], &pts[center])
            .partial_cmp(&d2(&pts[b], &pts[center]))
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

pub fn chamfer_oracle(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let dir = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|p| y.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    dir(a, b) + dir(b, a)
}

pub fn random_cloud(rng: &mut ChaCha8Rng, p: usize) -> Vec<[f64; 3]> {
    (0..p)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}
