//! Patch tokens, the fixed sin-cos embedding of patch centers, and the
//! learnable positional embedding module (PEM) on top of it.

mod pointnet;
mod sincos;

pub use pointnet::MiniPointNet;
pub use sincos::{sincos_frequencies, sincos_pe, sincos_pe_var};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensorcore::{ParamId, ParamStore, Tape, Var};

/// Two-layer MLP `D → D → D` with GELU, shared by visible and masked centers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pem {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Pem {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Pem {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pe: Var,
    ) -> Result<Var> {
        let width = *tape.shape(pe).last().unwrap_or(&0);
        if width != self.fc1.inputs {
            return Err(Error::shape("pem", tape.shape(pe), &[self.fc1.inputs]));
        }
        let h = self.fc1.forward(tape, store, pe)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }

    pub fn num_params(dim: usize) -> usize {
        2 * Linear::num_params(dim, dim, true)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.fc1.params(), self.fc2.params()].concat()
    }
}
