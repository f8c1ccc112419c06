//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderConfig;
use crate::degradation::DatasetConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::sampler::SamplerConfig;
use crate::semantic::ExtractorConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.timesteps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Denoiser fine-tuning steps (control branch and cross-attention).
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub autoencoder_steps: usize,
    pub autoencoder_lr: f64,
    /// Unconditional backbone pretraining steps, run before the backbone is frozen.
    pub backbone_steps: usize,
    pub backbone_lr: f64,
    /// Probability of dropping the prompt tokens for a whole batch.
    pub prompt_dropout: f64,
    /// Write a resumable checkpoint every this many fine-tuning steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 5e-5,
            batch_size: 4,
            autoencoder_steps: 600,
            autoencoder_lr: 2e-3,
            backbone_steps: 800,
            backbone_lr: 1e-3,
            prompt_dropout: 0.1,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(&self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    pub dtype: Precision,
}

/// Model architecture: everything needed to rebuild the networks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub schedule: ScheduleConfig,
    pub autoencoder: AutoencoderConfig,
    pub extractor: ExtractorConfig,
    pub denoiser: DenoiserConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.denoiser.validate()?;
        if self.denoiser.latent_channels != self.autoencoder.latent_channels {
            return Err(Error::InvalidConfig(format!(
                "denoiser latent_channels {} != autoencoder latent_channels {}",
                self.denoiser.latent_channels, self.autoencoder.latent_channels
            )));
        }
        if self.denoiser.semantic_dim != self.extractor.out_dim {
            return Err(Error::InvalidConfig(format!(
                "denoiser semantic_dim {} != extractor out_dim {}",
                self.denoiser.semantic_dim, self.extractor.out_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub autoencoder: AutoencoderConfig,
    pub extractor: ExtractorConfig,
    pub denoiser: DenoiserConfig,
    pub dataset: DatasetConfig,
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    pub runtime: RuntimeConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            schedule: self.schedule.clone(),
            autoencoder: self.autoencoder.clone(),
            extractor: self.extractor.clone(),
            denoiser: self.denoiser.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.dataset.synthetic_recipe.validate()?;
        self.dataset.wild_recipe.validate()?;
        let o = &self.optimizer;
        if o.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&o.prompt_dropout) {
            return Err(Error::InvalidConfig("prompt_dropout must lie in [0, 1]".into()));
        }
        for (name, lr) in [("lr", o.lr), ("autoencoder_lr", o.autoencoder_lr), ("backbone_lr", o.backbone_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let sched = self.schedule.build()?;
        self.sampler.validate(&sched)
    }

    pub fn dtype(&self) -> DType {
        self.runtime.dtype.dtype()
    }
}
