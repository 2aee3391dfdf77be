use super::{sq_dist, Point};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Symmetric Chamfer distance with squared Euclidean terms, each direction
/// averaged over its own set.
pub fn chamfer_l2<T: Scalar>(a: &[Point<T>], b: &[Point<T>]) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("chamfer of an empty set"));
    }
    let mut best_b = vec![T::infinity(); b.len()];
    let mut sum_a = T::zero();
    for x in a {
        let mut best = T::infinity();
        for (y, bb) in b.iter().zip(best_b.iter_mut()) {
            let d = sq_dist(x, y);
            best = best.min(d);
            *bb = bb.min(d);
        }
        sum_a += best;
    }
    let sum_b: T = best_b.into_iter().sum();
    Ok(sum_a / T::from_usize(a.len()).unwrap() + sum_b / T::from_usize(b.len()).unwrap())
}
