use std::fmt;

use serde::Serialize;

use crate::model::{count_params, param_breakdown, ModelConfig, ParamBreakdown};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelInfo {
    pub config: ModelConfig,
    /// Count with the PCM sharing the encoder blocks.
    pub shared: usize,
    /// Count with separate PCM blocks.
    pub unshared: usize,
    pub breakdown: ParamBreakdown,
}

pub fn model_info(config: &ModelConfig) -> ModelInfo {
    let shared_cfg = ModelConfig {
        share_pcm_weights: true,
        ..config.clone()
    };
    let unshared_cfg = ModelConfig {
        share_pcm_weights: false,
        ..config.clone()
    };
    ModelInfo {
        config: config.clone(),
        shared: count_params(&shared_cfg),
        unshared: count_params(&unshared_cfg),
        breakdown: param_breakdown(config),
    }
}

impl fmt::Display for ModelInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = |n: usize| n as f64 / 1e6;
        writeln!(
            f,
            "parameters (shared PCM):     {:>11} ({:.2} M)",
            self.shared,
            m(self.shared)
        )?;
        writeln!(
            f,
            "parameters (separate PCM):   {:>11} ({:.2} M)",
            self.unshared,
            m(self.unshared)
        )?;
        writeln!(
            f,
            "difference:                  {:>11}",
            self.unshared - self.shared
        )?;
        writeln!(
            f,
            "breakdown ({}):",
            if self.config.share_pcm_weights {
                "shared"
            } else {
                "separate"
            }
        )?;
        let b = &self.breakdown;
        for (name, n) in [
            ("embed", b.embed),
            ("pem", b.pem),
            ("encoder", b.encoder),
            ("pcm", b.pcm),
            ("encoder_norm", b.encoder_norm),
            ("mask_token", b.mask_token),
            ("projector", b.projector),
            ("decoder", b.decoder),
            ("decoder_norm", b.decoder_norm),
            ("head", b.head),
        ] {
            writeln!(f, "  {name:<14}{n:>11}")?;
        }
        writeln!(f, "config:")?;
        write!(
            f,
            "{}",
            serde_json::to_string_pretty(&self.config).expect("config serializes")
        )
    }
}
