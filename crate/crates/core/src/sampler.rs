//! Reverse-diffusion super-resolution with classifier-free guidance.

use serde::{Deserialize, Serialize};

use candle_core::DType;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{ConditioningBundle, WithoutControl};
use crate::diffusion::{forward_marginal, reverse_step, NoisePredictor, NoiseSchedule};
use crate::imaging::{images_to_tensor, upsample, Image};
use crate::pipeline::Models;
use crate::prompt::{phrases, tag_image, PromptSet, NEGATIVE_PROMPT, POSITIVE_PROMPT};
use crate::rng::{randn, seeded_rng};
use crate::tensor::LatentTensor;
use crate::{Error, Result};

pub const SCALE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPoint {
    /// Pure Gaussian noise at the last timestep.
    Noise,
    /// The LR latent noised to an intermediate timestep.
    Lr,
}

impl std::str::FromStr for StartPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(StartPoint::Noise),
            "lr" => Ok(StartPoint::Lr),
            other => Err(Error::InvalidConfig(format!("unknown start point {other:?}"))),
        }
    }
}

impl StartPoint {
    pub fn as_str(&self) -> &'static str {
        match self {
            StartPoint::Noise => "noise",
            StartPoint::Lr => "lr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Synthetic,
    Wild,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Preset::Synthetic),
            "wild" => Ok(Preset::Wild),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }
}

impl Preset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Synthetic => "synthetic",
            Preset::Wild => "wild",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub start_point: StartPoint,
    /// Timestep the LR start is noised to; defaults to two thirds of the schedule.
    pub start_timestep: Option<usize>,
    /// Phrases appended to the image tags on the conditional branch.
    pub positive_prompt: Vec<String>,
    /// Phrases for the guidance branch; empty means the unconditional prompt.
    pub negative_prompt: Vec<String>,
    pub seed: u64,
    pub use_control: bool,
    pub use_semantic: bool,
    /// Largest accepted LR side, in pixels.
    pub max_input_side: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::preset(Preset::Synthetic)
    }
}

impl SamplerConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            num_steps: 50,
            guidance_scale: 0.9,
            start_point: StartPoint::Lr,
            start_timestep: None,
            positive_prompt: Vec::new(),
            negative_prompt: Vec::new(),
            seed: 0,
            use_control: true,
            use_semantic: true,
            max_input_side: 1024,
        };
        match p {
            Preset::Synthetic => base,
            Preset::Wild => Self {
                guidance_scale: 8.5,
                start_point: StartPoint::Noise,
                positive_prompt: phrases(POSITIVE_PROMPT),
                ..base
            },
        }
    }

    /// Replace both prompt lists with one of the fixed prompt choices.
    pub fn with_prompt_set(mut self, set: PromptSet) -> Self {
        self.positive_prompt.clear();
        self.negative_prompt.clear();
        match set {
            PromptSet::None => {}
            PromptSet::Positive => self.positive_prompt = phrases(POSITIVE_PROMPT),
            PromptSet::Negative => self.negative_prompt = phrases(NEGATIVE_PROMPT),
        }
        self
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::InvalidConfig("num_steps must be at least 1".into()));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::InvalidConfig("guidance_scale must be finite and non-negative".into()));
        }
        sched.check_t(self.start_timestep(sched))
    }

    pub fn start_timestep(&self, sched: &NoiseSchedule) -> usize {
        match self.start_point {
            StartPoint::Noise => sched.len() - 1,
            StartPoint::Lr => self.start_timestep.unwrap_or(2 * sched.len() / 3),
        }
    }
}

/// `ε_neg + s·(ε_pos − ε_neg)`, returning either input untouched at `s = 1`
/// and `s = 0`.
pub fn cfg_combine(eps_pos: &LatentTensor, eps_neg: &LatentTensor, scale: f64) -> Result<LatentTensor> {
    eps_pos.ensure_same_shape(eps_neg, "cfg_combine")?;
    if scale == 1.0 {
        return Ok(eps_pos.clone());
    }
    if scale == 0.0 {
        return Ok(eps_neg.clone());
    }
    let diff = (eps_pos.tensor() - eps_neg.tensor())?;
    eps_pos.with_data((eps_neg.tensor() + (diff * scale)?)?)
}

/// Classifier-free guided noise prediction. Only the branch that matters is
/// evaluated at `gs = 0` and `gs = 1`.
pub fn cfg_predict(
    model: &dyn NoisePredictor,
    x_t: &LatentTensor,
    t: usize,
    cond_pos: &ConditioningBundle,
    cond_neg: &ConditioningBundle,
    gs: f64,
) -> Result<LatentTensor> {
    if gs == 1.0 {
        return model.predict_noise(x_t, &[t], cond_pos);
    }
    if gs == 0.0 {
        return model.predict_noise(x_t, &[t], cond_neg);
    }
    let pos = model.predict_noise(x_t, &[t], cond_pos)?;
    let neg = model.predict_noise(x_t, &[t], cond_neg)?;
    cfg_combine(&pos, &neg, gs)
}

/// Initial latent and timestep of the reverse chain.
pub fn init_start(
    cfg: &SamplerConfig,
    lr_latent: Option<&LatentTensor>,
    shape: &[usize],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(LatentTensor, usize)> {
    let t = cfg.start_timestep(sched);
    sched.check_t(t)?;
    let dtype = lr_latent.map(|l| l.dtype()).unwrap_or(DType::F32);
    let noise = LatentTensor::latent(randn(rng, shape, dtype)?)?;
    match cfg.start_point {
        StartPoint::Noise => Ok((noise, t)),
        StartPoint::Lr => {
            let lr = lr_latent.ok_or(Error::MissingCondition("lr_latent"))?;
            Ok((forward_marginal(lr, t, sched, &noise)?, t))
        }
    }
}

/// Positive and negative conditioning for one LR image.
pub struct PreparedCondition {
    pub positive: ConditioningBundle,
    pub negative: ConditioningBundle,
    pub lr_latent: LatentTensor,
}

/// Encode an LR image's conditions: bicubic-upsampled LR latent, semantic
/// tokens, and prompt tokens. The semantic embedding is kept on both branches.
pub fn prepare_condition(models: &Models, lr: &Image, cfg: &SamplerConfig) -> Result<PreparedCondition> {
    let dtype = models.store.dtype();
    let factor = models.autoencoder.config().factor;
    if lr.width() > cfg.max_input_side || lr.height() > cfg.max_input_side {
        return Err(Error::InvalidInput(format!(
            "LR size {}x{} exceeds the configured cap {}",
            lr.width(),
            lr.height(),
            cfg.max_input_side
        )));
    }
    if (lr.width() * SCALE) % factor != 0 || (lr.height() * SCALE) % factor != 0 {
        return Err(Error::InvalidInput(format!(
            "LR size {}x{} gives an HR size not divisible by the latent factor {factor}",
            lr.width(),
            lr.height()
        )));
    }
    let up = upsample(lr, SCALE)?.clamp01();
    let lr_latent = models.autoencoder.encode(&images_to_tensor(&[up], dtype)?)?;
    let semantic = if cfg.use_semantic {
        Some(models.extractor.embed(&images_to_tensor(std::slice::from_ref(lr), dtype)?)?)
    } else {
        None
    };
    let mut pos_phrases = tag_image(lr);
    pos_phrases.extend(cfg.positive_prompt.iter().cloned());
    let pos_tokens = models.prompts.encode(&[pos_phrases], dtype)?;
    let neg_tokens = if cfg.negative_prompt.is_empty() {
        None
    } else {
        models.prompts.encode(&[cfg.negative_prompt.clone()], dtype)?
    };
    Ok(PreparedCondition {
        positive: ConditioningBundle::new(Some(lr_latent.clone()), pos_tokens, semantic.clone()),
        negative: ConditioningBundle::new(Some(lr_latent.clone()), neg_tokens, semantic),
        lr_latent,
    })
}

/// Super-resolve one LR image. Randomness depends only on `(cfg.seed, index)`.
pub fn sample_one(models: &Models, lr: &Image, cfg: &SamplerConfig, index: usize) -> Result<Image> {
    let sched = &models.schedule;
    cfg.validate(sched)?;
    let cond = prepare_condition(models, lr, cfg)?;
    let dtype = models.store.dtype();
    let shape = cond.lr_latent.dims().to_vec();
    let mut rng = seeded_rng(cfg.seed, &["sample", &index.to_string()]);
    let without = WithoutControl(&models.denoiser);
    let model: &dyn NoisePredictor = if cfg.use_control { &models.denoiser } else { &without };

    let (mut x, start) = init_start(cfg, Some(&cond.lr_latent), &shape, sched, &mut rng)?;
    let ladder = sched.ladder(start, cfg.num_steps)?;
    let ascending: Vec<usize> = ladder.iter().rev().copied().collect();
    let respaced = sched.respace(&ascending)?;
    for k in (0..ascending.len()).rev() {
        let eps = cfg_predict(model, &x, ascending[k], &cond.positive, &cond.negative, cfg.guidance_scale)?;
        let z = if k > 0 {
            Some(LatentTensor::latent(randn(&mut rng, &shape, dtype)?)?)
        } else {
            None
        };
        x = reverse_step(&x, k, &eps, &respaced, z.as_ref())?;
        x.ensure_finite("sampler state")?;
    }
    let img = models.autoencoder.decode(&x)?;
    Ok(Image::from_tensor(&img)?.remove(0))
}

/// Super-resolve a batch of LR images.
pub fn sample(models: &Models, lr_images: &[Image], cfg: &SamplerConfig) -> Result<Vec<Image>> {
    lr_images
        .iter()
        .enumerate()
        .map(|(i, lr)| sample_one(models, lr, cfg, i))
        .collect()
}

/// Decoded bicubic baseline: the LR image upsampled 4×.
pub fn bicubic_baseline(lr: &Image) -> Result<Image> {
    Ok(upsample(lr, SCALE)?.clamp01())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Tensor};

    fn lt(v: &[f64]) -> LatentTensor {
        LatentTensor::latent(Tensor::from_vec(v.to_vec(), (1, 1, 1, v.len()), &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn cfg_oracle() {
        let p = lt(&[1.0, -2.0, 0.5]);
        let n = lt(&[0.25, 1.0, -1.0]);
        assert_eq!(cfg_combine(&p, &n, 1.0).unwrap().to_vec().unwrap(), p.to_vec().unwrap());
        assert_eq!(cfg_combine(&p, &n, 0.0).unwrap().to_vec().unwrap(), n.to_vec().unwrap());
        let got = cfg_combine(&p, &n, 8.5).unwrap().to_vec().unwrap();
        let pv = [1.0, -2.0, 0.5];
        let nv = [0.25, 1.0, -1.0];
        for i in 0..3 {
            let expect = nv[i] + 8.5 * (pv[i] - nv[i]);
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn presets() {
        let s = SamplerConfig::preset(Preset::Synthetic);
        assert_eq!(s.guidance_scale, 0.9);
        assert_eq!(s.start_point, StartPoint::Lr);
        assert!(s.positive_prompt.is_empty() && s.negative_prompt.is_empty());
        let w = SamplerConfig::preset(Preset::Wild);
        assert_eq!(w.guidance_scale, 8.5);
        assert_eq!(w.start_point, StartPoint::Noise);
        assert_eq!(w.positive_prompt, phrases(POSITIVE_PROMPT));
        let n = w.clone().with_prompt_set(PromptSet::Negative);
        assert!(n.positive_prompt.is_empty());
        assert_eq!(n.negative_prompt.len(), 7);
        assert_eq!(w.num_steps, 50);
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(w.start_timestep(&sched), 999);
        assert_eq!(s.start_timestep(&sched), 666);
        let _ = DType::F32;
    }
}
