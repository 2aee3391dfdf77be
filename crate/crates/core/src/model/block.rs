use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::tensorcore::{ParamId, ParamStore, Tape, Var};

/// Pre-norm Transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub scale: f64,
}

/// Head-split keys `[B, h, dh, L]` and values `[B, h, L, dh]` of one stream.
#[derive(Clone, Copy, Debug)]
pub struct KeyValues {
    pub keys: Var,
    pub values: Var,
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        Ok(Block {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            wq: Linear::new(store, &format!("{name}.attn.wq"), dim, dim, false, rng)?,
            wk: Linear::new(store, &format!("{name}.attn.wk"), dim, dim, false, rng)?,
            wv: Linear::new(store, &format!("{name}.attn.wv"), dim, dim, false, rng)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, true, rng)?,
            heads,
            scale,
        })
    }

    pub fn num_params(dim: usize, mlp_ratio: usize) -> usize {
        let hidden = dim * mlp_ratio;
        2 * LayerNorm::num_params(dim)
            + 3 * Linear::num_params(dim, dim, false)
            + Linear::num_params(dim, dim, true)
            + Linear::num_params(dim, hidden, true)
            + Linear::num_params(hidden, dim, true)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.norm1.params(),
            self.wq.params(),
            self.wk.params(),
            self.wv.params(),
            self.proj.params(),
            self.norm2.params(),
            self.fc1.params(),
            self.fc2.params(),
        ]
        .concat()
    }

    /// `[B, L, D]` to `[B, h, L, dh]`, or `[B, h, dh, L]` when `transposed`.
    fn split_heads<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, transposed: bool) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [b, l, d] = shape[..] else {
            return Err(Error::shape("split_heads", &shape, &[0, 0, 0]));
        };
        let x = tape.reshape(x, &[b, l, self.heads, d / self.heads])?;
        tape.permute(
            x,
            if transposed {
                &[0, 2, 3, 1]
            } else {
                &[0, 2, 1, 3]
            },
        )
    }

    /// Keys and values of an already-normalized stream.
    pub fn key_values<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        normed: Var,
    ) -> Result<KeyValues> {
        let k = self.wk.forward(tape, store, normed)?;
        let v = self.wv.forward(tape, store, normed)?;
        Ok(KeyValues {
            keys: self.split_heads(tape, k, true)?,
            values: self.split_heads(tape, v, false)?,
        })
    }

    /// Attention probabilities `[B, h, L, S]` of `normed` queries over the
    /// concatenation of `sources`, together with the concatenated values.
    pub fn attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        normed: Var,
        sources: &[KeyValues],
    ) -> Result<(Var, Var)> {
        let q = self.wq.forward(tape, store, normed)?;
        let q = self.split_heads(tape, q, false)?;
        let (keys, values) = if let [only] = sources {
            (only.keys, only.values)
        } else {
            let ks: Vec<Var> = sources.iter().map(|s| s.keys).collect();
            let vs: Vec<Var> = sources.iter().map(|s| s.values).collect();
            (tape.concat(&ks, 3)?, tape.concat(&vs, 2)?)
        };
        let logits = tape.matmul(q, keys)?;
        let logits = tape.scale(logits, T::lit(self.scale));
        Ok((tape.softmax(logits, 3)?, values))
    }

    fn attend<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        normed: Var,
        sources: &[KeyValues],
    ) -> Result<Var> {
        let shape = tape.shape(normed).to_vec();
        let (weights, values) = self.attention(tape, store, normed, sources)?;
        let ctx = tape.matmul(weights, values)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &shape)?;
        self.proj.forward(tape, store, ctx)
    }

    fn mlp<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }

    /// Self-attention block. Also returns the stream's keys/values so a
    /// weight-shared cross-attention can reuse them.
    pub fn forward_self<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, KeyValues)> {
        let normed = self.norm1.forward(tape, store, x)?;
        let kv = self.key_values(tape, store, normed)?;
        let a = self.attend(tape, store, normed, &[kv])?;
        let x = tape.add(x, a)?;
        Ok((self.mlp(tape, store, x)?, kv))
    }

    /// Cross-attention block: queries from `x`, keys/values from `context`
    /// followed by `x` itself.
    pub fn forward_cross<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        context: Option<KeyValues>,
    ) -> Result<Var> {
        let normed = self.norm1.forward(tape, store, x)?;
        let own = self.key_values(tape, store, normed)?;
        let sources: Vec<KeyValues> = context.into_iter().chain([own]).collect();
        let a = self.attend(tape, store, normed, &sources)?;
        let x = tape.add(x, a)?;
        self.mlp(tape, store, x)
    }
}
