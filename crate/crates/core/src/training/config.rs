use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Augmentation;
use crate::model::ModelConfig;

/// Distance used for the center-prediction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcLoss {
    L2,
    L1,
    SmoothL1,
    Cosine,
}

impl std::str::FromStr for PcLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(PcLoss::L2),
            "l1" => Ok(PcLoss::L1),
            "smooth_l1" => Ok(PcLoss::SmoothL1),
            "cosine" => Ok(PcLoss::Cosine),
            _ => Err(Error::Config(format!(
                "unknown pc loss {s:?} (l2, l1, smooth_l1, cosine)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mask_ratio: f64,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub augmentations: Vec<Augmentation>,
    pub pc_loss: PcLoss,
    /// Detach the predicted center embeddings before the decoder.
    pub stop_gradient: bool,
    /// Let the center loss backpropagate into the PEM through its target.
    pub target_grad: bool,
    /// Synthetic pre-training set: cloud count, points per cloud, noise, seed.
    pub dataset_size: usize,
    pub cloud_points: usize,
    pub noise: f64,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mask_ratio: 0.6,
            eta: 0.1,
            epochs: 200,
            batch_size: 16,
            lr: 5e-4,
            min_lr: 1e-6,
            weight_decay: 0.05,
            warmup_epochs: 10,
            grad_clip: 10.0,
            seed: 0,
            augmentations: vec![Augmentation::ScaleTranslate, Augmentation::Rotate],
            pc_loss: PcLoss::L2,
            stop_gradient: true,
            target_grad: false,
            dataset_size: 200,
            cloud_points: 2048,
            noise: 0.0,
            data_seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 128,
            cloud_points: 8192,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if !(self.eta >= 0.0) {
            return bad(format!("eta {} must be >= 0", self.eta));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.dataset_size == 0 {
            return bad("epochs, batch_size and dataset_size must be >= 1".into());
        }
        if !(self.lr > 0.0)
            || !(self.min_lr >= 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.grad_clip > 0.0)
        {
            return bad(
                "lr and grad_clip must be positive; min_lr and weight_decay non-negative".into(),
            );
        }
        if self.cloud_points < 8 || !(self.noise >= 0.0) {
            return bad("cloud_points must be >= 8 and noise >= 0".into());
        }
        Ok(())
    }
}

/// Model and training settings as one flat JSON object.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn paper() -> Self {
        RunConfig {
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
        }
    }

    /// Desk settings for the decoder-only leakage run. With the encoder
    /// frozen, the decoder alone trains faster at a higher rate and with
    /// more, smaller steps.
    pub fn leakage() -> Self {
        let mut cfg = Self::default();
        cfg.train.lr = 2e-3;
        cfg.train.batch_size = 4;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.cloud_points < self.model.num_points {
            return Err(Error::Config(format!(
                "cloud_points {} smaller than num_points {}",
                self.train.cloud_points, self.model.num_points
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let known = serde_json::to_value(RunConfig::default())?;
        if let (Some(obj), Some(known)) = (value.as_object(), known.as_object()) {
            if let Some(key) = obj.keys().find(|k| !known.contains_key(*k)) {
                return Err(Error::Config(format!("unknown config field {key:?}")));
            }
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
