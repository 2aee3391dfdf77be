//! The PCP-MAE network.

mod block;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{sincos_pe_var, MiniPointNet, Pem};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::tensorcore::{ParamId, ParamStore, Tape, Var};

pub use block::{Block, KeyValues};
pub use config::{AttnScale, ModelConfig, TargetMode};

/// Center projector: optional Transformer blocks, then
/// `Linear -> LayerNorm -> ReLU -> Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub blocks: Vec<Block>,
    pub fc1: Linear,
    pub norm: LayerNorm,
    pub fc2: Linear,
}

impl Projector {
    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(Block::params).collect();
        ids.extend(self.fc1.params());
        ids.extend(self.norm.params());
        ids.extend(self.fc2.params());
        ids
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
    ) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward_self(tape, store, x)?.0;
        }
        let h = self.fc1.forward(tape, store, x)?;
        let h = self.norm.forward(tape, store, h)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Output of the joint encoder/PCM pass. Either stream is `None` when its
/// token set is empty.
#[derive(Clone, Copy, Debug)]
pub struct JointOutput {
    /// Normalized encoder output `[B, nv, D]`.
    pub visible: Option<Var>,
    /// Projector output for the masked centers `[B, nm, W]`.
    pub predicted: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct PcpMae<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embed: MiniPointNet,
    pub pem: Pem,
    pub encoder: Vec<Block>,
    /// Separate PCM blocks; `None` when the PCM reuses the encoder blocks.
    pub pcm: Option<Vec<Block>>,
    pub encoder_norm: LayerNorm,
    pub mask_token: ParamId,
    pub projector: Projector,
    pub decoder: Vec<Block>,
    pub decoder_norm: LayerNorm,
    pub head: Linear,
}

impl<T: Scalar> PcpMae<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let d = config.dim;
        let scale = match config.attn_scale {
            AttnScale::PerHead => 1.0 / (config.head_dim() as f64).sqrt(),
            AttnScale::FullDim => 1.0 / (d as f64).sqrt(),
        };
        let blocks =
            |store: &mut ParamStore<T>, prefix: &str, depth: usize, rng: &mut ChaCha8Rng| {
                (0..depth)
                    .map(|i| {
                        Block::new(
                            store,
                            &format!("{prefix}.{i}"),
                            d,
                            config.heads,
                            config.mlp_ratio,
                            scale,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            };
        let embed = MiniPointNet::new(&mut store, "embed", d, rng)?;
        let pem = Pem::new(&mut store, "pem", d, rng)?;
        let encoder = blocks(&mut store, "encoder", config.encoder_depth, rng)?;
        let pcm = if config.share_pcm_weights {
            None
        } else {
            Some(blocks(&mut store, "pcm", config.encoder_depth, rng)?)
        };
        let encoder_norm = LayerNorm::new(&mut store, "encoder_norm", d)?;
        let mask_token = store.add("mask_token", normal_tensor(&[1, d], 0.02, rng))?;
        let projector = Projector {
            blocks: blocks(&mut store, "projector.blocks", config.projector_depth, rng)?,
            fc1: Linear::new(&mut store, "projector.fc1", d, d, true, rng)?,
            norm: LayerNorm::new(&mut store, "projector.norm", d)?,
            fc2: Linear::new(
                &mut store,
                "projector.fc2",
                d,
                config.prediction_width(),
                true,
                rng,
            )?,
        };
        let decoder = blocks(&mut store, "decoder", config.decoder_depth, rng)?;
        let decoder_norm = LayerNorm::new(&mut store, "decoder_norm", d)?;
        let head = Linear::new(&mut store, "head", d, 3 * config.patch_size, true, rng)?;
        Ok(PcpMae {
            config,
            store,
            embed,
            pem,
            encoder,
            pcm,
            encoder_norm,
            mask_token,
            projector,
            decoder,
            decoder_norm,
            head,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> PcpMae<U> {
        PcpMae {
            config: self.config.clone(),
            store: self.store.cast(),
            embed: self.embed.clone(),
            pem: self.pem.clone(),
            encoder: self.encoder.clone(),
            pcm: self.pcm.clone(),
            encoder_norm: self.encoder_norm.clone(),
            mask_token: self.mask_token,
            projector: self.projector.clone(),
            decoder: self.decoder.clone(),
            decoder_norm: self.decoder_norm.clone(),
            head: self.head.clone(),
        }
    }

    /// Blocks used by the PCM stream.
    pub fn pcm_blocks(&self) -> &[Block] {
        self.pcm.as_deref().unwrap_or(&self.encoder)
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// `[B, n, k, 3]` normalized patches to tokens `[B, n, D]`.
    pub fn embed(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        self.embed.forward(tape, &self.store, patches)
    }

    /// `[B, n, 3]` centers to learned positional embeddings `[B, n, D]`.
    pub fn center_pe(&self, tape: &mut Tape<T>, centers: Var) -> Result<Var> {
        let pe = sincos_pe_var(tape, centers, self.config.dim)?;
        self.pem.forward(tape, &self.store, pe)
    }

    /// Encoder over visible tokens in lockstep with the PCM over masked tokens.
    /// PCM block `i` attends to the encoder's input of block `i`; nothing from
    /// the masked stream reaches the visible stream.
    pub fn joint_forward(
        &self,
        tape: &mut Tape<T>,
        visible: Option<(Var, Var)>,
        masked: Option<Var>,
    ) -> Result<JointOutput> {
        let store = &self.store;
        let mut t = match visible {
            Some((e_v, pe_v)) => Some(tape.add(e_v, pe_v)?),
            None => None,
        };
        let mut pe_m = masked;
        for (i, enc) in self.encoder.iter().enumerate() {
            let mut context = None;
            if let Some(x) = t {
                let (next, kv) = enc.forward_self(tape, store, x)?;
                context = Some(match &self.pcm {
                    None => kv,
                    Some(pcm) => {
                        let normed = pcm[i].norm1.forward(tape, store, x)?;
                        pcm[i].key_values(tape, store, normed)?
                    }
                });
                t = Some(next);
            }
            if let Some(m) = pe_m {
                pe_m = Some(self.pcm_blocks()[i].forward_cross(tape, store, m, context)?);
            }
        }
        let visible = match t {
            Some(x) => Some(self.encoder_norm.forward(tape, store, x)?),
            None => None,
        };
        let predicted = match pe_m {
            Some(m) => {
                let m = self.encoder_norm.forward(tape, store, m)?;
                Some(self.projector.forward(tape, store, m)?)
            }
            None => None,
        };
        Ok(JointOutput { visible, predicted })
    }

    /// Decoder-side positional embedding of the masked tokens from the
    /// projector output. With `stop_gradient` the prediction is detached.
    pub fn decoder_masked_pe(
        &self,
        tape: &mut Tape<T>,
        predicted: Var,
        stop_gradient: bool,
    ) -> Result<Var> {
        let p = if stop_gradient {
            tape.stop_gradient(predicted)
        } else {
            predicted
        };
        match self.config.target_mode {
            TargetMode::Pem => Ok(p),
            TargetMode::Sincos => self.pem.forward(tape, &self.store, p),
            TargetMode::Coords => {
                let pe = sincos_pe_var(tape, p, self.config.dim)?;
                self.pem.forward(tape, &self.store, pe)
            }
        }
    }

    /// Decoder over `concat(T_v + PE_v, [M] + masked_pe)`, returning the
    /// normalized outputs at the masked positions `[B, nm, D]`.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape<T>,
        visible: Option<(Var, Var)>,
        masked_pe: Var,
    ) -> Result<Var> {
        let store = &self.store;
        let shape = tape.shape(masked_pe).to_vec();
        let nm = shape[1];
        let token = tape.param(store, self.mask_token);
        let token = tape.expand(token, &shape)?;
        let masked = tape.add(token, masked_pe)?;
        let (mut x, pe) = match visible {
            Some((t_v, pe_v)) => {
                let v = tape.add(t_v, pe_v)?;
                let pe = tape.concat(&[pe_v, masked_pe], 1)?;
                (tape.concat(&[v, masked], 1)?, pe)
            }
            None => (masked, masked_pe),
        };
        for (i, b) in self.decoder.iter().enumerate() {
            if i > 0 && self.config.decoder_pe_every_block {
                x = tape.add(x, pe)?;
            }
            x = b.forward_self(tape, store, x)?.0;
        }
        let x = self.decoder_norm.forward(tape, store, x)?;
        let total = tape.shape(x)[1];
        tape.slice(x, 1, total - nm, nm)
    }

    /// `[B, nm, D]` to predicted patches `[B * nm, k, 3]`.
    pub fn reconstruction_head(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.config.dim {
            return Err(Error::shape(
                "reconstruction_head",
                &shape,
                &[0, 0, self.config.dim],
            ));
        }
        let y = self.head.forward(tape, &self.store, h)?;
        tape.reshape(y, &[shape[0] * shape[1], self.config.patch_size, 3])
    }
}

/// Parameter count of one model component.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamBreakdown {
    pub embed: usize,
    pub pem: usize,
    pub encoder: usize,
    pub pcm: usize,
    pub encoder_norm: usize,
    pub mask_token: usize,
    pub projector: usize,
    pub decoder: usize,
    pub decoder_norm: usize,
    pub head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embed
            + self.pem
            + self.encoder
            + self.pcm
            + self.encoder_norm
            + self.mask_token
            + self.projector
            + self.decoder
            + self.decoder_norm
            + self.head
    }
}

/// Analytic parameter count; shared PCM weights are counted once.
pub fn param_breakdown(config: &ModelConfig) -> ParamBreakdown {
    let d = config.dim;
    let block = Block::num_params(d, config.mlp_ratio);
    let encoder = config.encoder_depth * block;
    ParamBreakdown {
        embed: MiniPointNet::num_params(d),
        pem: Pem::num_params(d),
        encoder,
        pcm: if config.share_pcm_weights { 0 } else { encoder },
        encoder_norm: LayerNorm::num_params(d),
        mask_token: d,
        projector: config.projector_depth * block
            + Linear::num_params(d, d, true)
            + LayerNorm::num_params(d)
            + Linear::num_params(d, config.prediction_width(), true),
        decoder: config.decoder_depth * block,
        decoder_norm: LayerNorm::num_params(d),
        head: Linear::num_params(d, 3 * config.patch_size, true),
    }
}

pub fn count_params(config: &ModelConfig) -> usize {
    param_breakdown(config).total()
}
