//! JSON configuration shared by the subcommands. Every section has full
//! defaults, so `{}` is a valid config file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vmra_core::pipeline::ModelConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    /// Share of subjects that develop a lesion within the horizon.
    pub positive_fraction: f64,
    pub image_size: usize,
    pub timesteps: usize,
    /// Lesion radius (pixels) at onset and its yearly growth.
    pub lesion_radius: f64,
    pub growth_rate: f64,
    /// Peak brightness added by the lesion.
    pub lesion_contrast: f64,
    /// Years a lesion is visible before diagnosis.
    pub lead_years: f64,
    /// The dense-area covariate is drawn from `Beta(a, b)`.
    pub density_alpha: f64,
    pub density_beta: f64,
    /// Texture amplitude at zero and full density.
    pub texture_min: f64,
    pub texture_max: f64,
    /// Side-specific (asymmetric) noise amplitude at zero and full density.
    pub side_noise_min: f64,
    pub side_noise_max: f64,
    /// Probability that a non-final exam is missing.
    pub missing_prob: f64,
    /// Probability that an event-free subject leaves follow-up early.
    pub censor_prob: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 500,
            positive_fraction: 0.5,
            image_size: 64,
            timesteps: 5,
            lesion_radius: 1.5,
            growth_rate: 1.2,
            lesion_contrast: 0.35,
            lead_years: 4.0,
            density_alpha: 2.0,
            density_beta: 2.0,
            texture_min: 0.04,
            texture_max: 0.22,
            side_noise_min: 0.01,
            side_noise_max: 0.04,
            missing_prob: 0.1,
            censor_prob: 0.3,
            horizon: 5,
            seed: 17,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("positive_fraction", self.positive_fraction)?;
        unit("missing_prob", self.missing_prob)?;
        unit("censor_prob", self.censor_prob)?;
        if self.n_subjects == 0 {
            return Err(Error::config("n_subjects must be positive"));
        }
        if self.timesteps == 0 || self.horizon == 0 {
            return Err(Error::config("timesteps and horizon must be positive"));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::config(format!("image_size {} must be a positive multiple of 8", self.image_size)));
        }
        for (name, v) in [
            ("lesion_radius", self.lesion_radius),
            ("lead_years", self.lead_years),
            ("density_alpha", self.density_alpha),
            ("density_beta", self.density_beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("growth_rate", self.growth_rate),
            ("lesion_contrast", self.lesion_contrast),
            ("texture_min", self.texture_min),
            ("texture_max", self.texture_max),
            ("side_noise_min", self.side_noise_min),
            ("side_noise_max", self.side_noise_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Keep the image encoder at its initial weights and cache its features.
    pub freeze_encoder: bool,
    /// Train/validation fractions; the remainder is the test split.
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Seeds the subject split.
    pub split_seed: u64,
    /// Seeds initialization and batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            freeze_encoder: true,
            train_fraction: 0.70,
            val_fraction: 0.15,
            split_seed: 17,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be non-negative"));
        }
        if !(0.0..).contains(&self.weight_decay) || !(0.0..).contains(&self.clip_norm) {
            return Err(Error::config("weight_decay and clip_norm must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("betas must lie in [0, 1) and eps must be positive"));
        }
        let (a, b) = (self.train_fraction, self.val_fraction);
        if !(a > 0.0 && b >= 0.0 && a + b <= 1.0) {
            return Err(Error::config(format!("split fractions {a}/{b} are not a partition")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub bootstrap_samples: usize,
    pub bootstrap_seed: u64,
    pub model_tag: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { bootstrap_samples: 1000, bootstrap_seed: 0, model_tag: "vmra".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Config = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.model.encoder.image_size != self.data.image_size {
            return Err(Error::config(format!(
                "encoder expects {}px images, data has {}px",
                self.model.encoder.image_size, self.data.image_size
            )));
        }
        if self.model.horizon != self.data.horizon {
            return Err(Error::config("model and data horizons differ"));
        }
        Ok(())
    }
}
