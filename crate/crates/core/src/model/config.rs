use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the center-prediction branch regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Learned positional embedding of the masked centers.
    Pem,
    /// Fixed sin-cos embedding of the masked centers.
    Sincos,
    /// Raw center coordinates (3-wide projector output).
    Coords,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pem" => Ok(TargetMode::Pem),
            "sincos" => Ok(TargetMode::Sincos),
            "coords" => Ok(TargetMode::Coords),
            _ => Err(Error::Config(format!(
                "unknown target mode {s:?} (pem, sincos, coords)"
            ))),
        }
    }
}

/// Attention logit scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// `1/sqrt(D / heads)`
    PerHead,
    /// `1/sqrt(D)`
    FullDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Points per patch (k).
    pub patch_size: usize,
    /// Patches per cloud (n).
    pub num_patches: usize,
    /// Points sampled from each input cloud before patching.
    pub num_points: usize,
    /// Extra Transformer blocks in the center projector.
    pub projector_depth: usize,
    pub share_pcm_weights: bool,
    pub target_mode: TargetMode,
    pub attn_scale: AttnScale,
    /// Re-add positional embeddings before every decoder block instead of
    /// only at the decoder input.
    pub decoder_pe_every_block: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-size architecture: 12 encoder and 4 decoder blocks of width 384.
    pub fn paper() -> Self {
        ModelConfig {
            dim: 384,
            encoder_depth: 12,
            decoder_depth: 4,
            heads: 6,
            mlp_ratio: 4,
            patch_size: 32,
            num_patches: 64,
            num_points: 1024,
            projector_depth: 0,
            share_pcm_weights: true,
            target_mode: TargetMode::Pem,
            attn_scale: AttnScale::PerHead,
            decoder_pe_every_block: false,
        }
    }

    /// Laptop-scale default.
    pub fn desk() -> Self {
        ModelConfig {
            dim: 96,
            encoder_depth: 4,
            decoder_depth: 2,
            heads: 4,
            patch_size: 16,
            num_patches: 16,
            num_points: 256,
            ..Self::paper()
        }
    }

    /// Tiny configuration for finite-difference checks.
    pub fn gradcheck() -> Self {
        ModelConfig {
            dim: 24,
            encoder_depth: 2,
            decoder_depth: 1,
            heads: 4,
            patch_size: 8,
            num_patches: 4,
            num_points: 32,
            ..Self::paper()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Width of the center-prediction output.
    pub fn prediction_width(&self) -> usize {
        match self.target_mode {
            TargetMode::Coords => 3,
            TargetMode::Pem | TargetMode::Sincos => self.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || !self.dim.is_multiple_of(6) {
            return bad(format!("dim {} must be a positive multiple of 6", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return bad("encoder and decoder depth must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        if self.patch_size == 0 || self.num_patches == 0 {
            return bad("patch_size and num_patches must be >= 1".into());
        }
        if self.num_patches > self.num_points || self.patch_size > self.num_points {
            return bad(format!(
                "num_points {} must cover num_patches {} and patch_size {}",
                self.num_points, self.num_patches, self.patch_size
            ));
        }
        Ok(())
    }
}
