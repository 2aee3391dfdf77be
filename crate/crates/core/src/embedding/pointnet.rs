use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensorcore::{ParamId, ParamStore, Tape, Var};

pub const POINT_FEATURES: usize = 128;
pub const FUSED_FEATURES: usize = 256;

/// Per-patch tokenizer: shared point-wise MLP, max-pool, concatenate the
/// pooled feature back onto every point, second MLP, max-pool again.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniPointNet {
    pub first: Linear,
    pub second: Linear,
    pub third: Linear,
    pub proj: Linear,
    pub dim: usize,
}

impl MiniPointNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(MiniPointNet {
            first: Linear::new(
                store,
                &format!("{name}.first"),
                3,
                POINT_FEATURES,
                true,
                rng,
            )?,
            second: Linear::new(
                store,
                &format!("{name}.second"),
                POINT_FEATURES,
                POINT_FEATURES,
                true,
                rng,
            )?,
            third: Linear::new(
                store,
                &format!("{name}.third"),
                FUSED_FEATURES,
                FUSED_FEATURES,
                true,
                rng,
            )?,
            proj: Linear::new(
                store,
                &format!("{name}.proj"),
                FUSED_FEATURES,
                dim,
                true,
                rng,
            )?,
            dim,
        })
    }

    /// `[B, n, k, 3]` patches to `[B, n, D]` tokens.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        patches: Var,
    ) -> Result<Var> {
        let shape = tape.shape(patches).to_vec();
        let [b, n, k, 3] = shape[..] else {
            return Err(Error::shape("mini_pointnet", &shape, &[0, 0, 0, 3]));
        };
        let x = tape.reshape(patches, &[b * n, k, 3])?;
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.second.forward(tape, store, h)?;
        let pooled = tape.max_axis(h, 1)?;
        let pooled = tape.reshape(pooled, &[b * n, 1, POINT_FEATURES])?;
        let pooled = tape.expand(pooled, &[b * n, k, POINT_FEATURES])?;
        let fused = tape.concat(&[pooled, h], 2)?;
        let h = self.third.forward(tape, store, fused)?;
        let h = tape.relu(h);
        let h = self.proj.forward(tape, store, h)?;
        let token = tape.max_axis(h, 1)?;
        tape.reshape(token, &[b, n, self.dim])
    }

    pub fn num_params(dim: usize) -> usize {
        Linear::num_params(3, POINT_FEATURES, true)
            + Linear::num_params(POINT_FEATURES, POINT_FEATURES, true)
            + Linear::num_params(FUSED_FEATURES, FUSED_FEATURES, true)
            + Linear::num_params(FUSED_FEATURES, dim, true)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.first, &self.second, &self.third, &self.proj]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}
