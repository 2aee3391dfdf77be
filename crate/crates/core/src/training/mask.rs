use rand::seq::SliceRandom;
use rand::Rng;

/// Disjoint split of patch indices `0..n`, both halves sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSplit {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

/// Number of masked patches, `floor(m n)`. The small slack keeps products
/// such as `0.29 * 100` from rounding down one too far.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Uniformly random split with `floor(m n)` masked patches.
pub fn mask_split<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> MaskSplit {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let count = masked_count(n, ratio);
    let mut masked = order[..count].to_vec();
    let mut visible = order[count..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    MaskSplit { masked, visible }
}
