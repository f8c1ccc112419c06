//! Noise schedules, the forward noising process, the ancestral reverse step
//! and the noise-prediction training loss.
//!
//! Timesteps are zero-based: `alpha_bars[t]` is the cumulative product over
//! steps `0..=t`, `forward_marginal(x0, t)` yields the sample after `t + 1`
//! noising steps, and `reverse_step` at `t = 0` lands on the clean sample
//! without injecting noise.

use candle_core::{DType, Device, Tensor};

use crate::denoiser::ConditioningBundle;
use crate::tensor::LatentTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(timesteps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                if timesteps == 1 {
                    vec![beta_start]
                } else {
                    let step = (beta_end - beta_start) / (timesteps - 1) as f64;
                    (0..timesteps)
                        .map(|i| if i + 1 == timesteps { beta_end } else { beta_start + step * i as f64 })
                        .collect()
                }
            }
        };
        Self::from_betas(betas)
    }

    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::build(timesteps, beta_start, beta_end, ScheduleKind::Linear)
    }

    /// Schedule from explicit betas in `[0, 1)`. Zero entries describe
    /// noiseless steps, which are only useful for degenerate test cases;
    /// [`NoiseSchedule::build`] always produces strictly positive betas.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            Err(Error::TimestepOutOfRange { t, len: self.len() })
        } else {
            Ok(())
        }
    }

    /// Schedule over an ascending subsequence of timesteps. Step `k` of the
    /// result jumps from `timesteps[k]` to `timesteps[k - 1]` (or to the clean
    /// sample for `k = 0`), with `beta'_k = 1 - ᾱ[τ_k] / ᾱ[τ_{k-1}]`, so the
    /// cumulative products of the respaced schedule match the original ones
    /// at the visited timesteps.
    pub fn respace(&self, timesteps: &[usize]) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::InvalidSchedule("empty timestep subsequence".into()));
        }
        let mut prev_bar = 1.0;
        let mut prev_t: Option<usize> = None;
        let mut betas = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            self.check_t(t)?;
            if prev_t.is_some_and(|p| p >= t) {
                return Err(Error::InvalidSchedule(
                    "respaced timesteps must be strictly increasing".into(),
                ));
            }
            let bar = self.alpha_bars[t];
            betas.push(1.0 - bar / prev_bar);
            prev_bar = bar;
            prev_t = Some(t);
        }
        Self::from_betas(betas)
    }

    /// Strictly decreasing ladder of `steps` timesteps from `start` down to 0,
    /// uniformly spaced. A single step visits only `start`.
    pub fn ladder(&self, start: usize, steps: usize) -> Result<Vec<usize>> {
        self.check_t(start)?;
        if steps == 0 {
            return Err(Error::InvalidConfig("num_steps must be at least 1".into()));
        }
        if steps == 1 {
            return Ok(vec![start]);
        }
        let steps = steps.min(start + 1);
        if steps == 1 {
            return Ok(vec![start]);
        }
        let mut out: Vec<usize> = (0..steps)
            .map(|i| ((start as f64) * (steps - 1 - i) as f64 / (steps - 1) as f64).round() as usize)
            .collect();
        out.dedup();
        Ok(out)
    }
}

fn coeff_tensor(values: &[f64], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// One noising step: `√(1−β_t)·x_prev + √β_t·noise`.
pub fn forward_step(
    x_prev: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    x_prev.ensure_same_shape(noise, "forward_step")?;
    sched.check_t(t)?;
    let beta = sched.betas[t];
    let out = ((x_prev.tensor() * (1.0 - beta).sqrt())? + (noise.tensor() * beta.sqrt())?)?;
    x_prev.with_data(out)
}

/// Closed-form marginal `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn forward_marginal(
    x0: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    x0.ensure_same_shape(noise, "forward_marginal")?;
    sched.check_t(t)?;
    let bar = sched.alpha_bars[t];
    let out = ((x0.tensor() * bar.sqrt())? + (noise.tensor() * (1.0 - bar).sqrt())?)?;
    x0.with_data(out)
}

/// Batched marginal with one timestep per batch element.
pub fn forward_marginal_batch(
    x0: &LatentTensor,
    ts: &[usize],
    sched: &NoiseSchedule,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    x0.ensure_same_shape(noise, "forward_marginal")?;
    if ts.len() != x0.batch() {
        return Err(Error::ShapeMismatch {
            op: "forward_marginal timesteps",
            lhs: vec![x0.batch()],
            rhs: vec![ts.len()],
        });
    }
    let mut a = Vec::with_capacity(ts.len());
    let mut s = Vec::with_capacity(ts.len());
    for &t in ts {
        sched.check_t(t)?;
        a.push(sched.alpha_bars[t].sqrt());
        s.push((1.0 - sched.alpha_bars[t]).sqrt());
    }
    let dtype = x0.dtype();
    let out = (x0.tensor().broadcast_mul(&coeff_tensor(&a, dtype)?)?
        + noise.tensor().broadcast_mul(&coeff_tensor(&s, dtype)?)?)?;
    x0.with_data(out)
}

/// Ancestral reverse step from `x_t` to `x_{t−1}`:
/// `(1/√α_t)·(x_t − β_t/√(1−ᾱ_t)·ε̂) + σ_t·noise`, with `σ_t² = β_t` and `σ_0 = 0`.
///
/// Passing `noise = None` forces `σ_t = 0` and returns the posterior mean.
pub fn reverse_step(
    x_t: &LatentTensor,
    t: usize,
    predicted_noise: &LatentTensor,
    sched: &NoiseSchedule,
    noise: Option<&LatentTensor>,
) -> Result<LatentTensor> {
    x_t.ensure_same_shape(predicted_noise, "reverse_step")?;
    sched.check_t(t)?;
    let beta = sched.betas[t];
    let alpha = sched.alphas[t];
    let bar = sched.alpha_bars[t];
    let eps_coeff = if beta == 0.0 { 0.0 } else { beta / (1.0 - bar).sqrt() };
    let mean = ((x_t.tensor() - (predicted_noise.tensor() * eps_coeff)?)? / alpha.sqrt())?;
    let out = match noise {
        Some(n) if t > 0 => {
            x_t.ensure_same_shape(n, "reverse_step")?;
            (mean + (n.tensor() * beta.sqrt())?)?
        }
        _ => mean,
    };
    x_t.with_data(out)
}

/// A noise-prediction network `ε_θ(x_t, t, cond)`.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        x_t: &LatentTensor,
        t: &[usize],
        cond: &ConditioningBundle,
    ) -> Result<LatentTensor>;
}

/// Mean squared error between `noise` and the model's prediction at
/// `x_t = forward_marginal(x0, t, noise)`. Returns a scalar tensor that can be
/// back-propagated into the model's trainable parameters.
pub fn training_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    x0_latent: &LatentTensor,
    cond: &ConditioningBundle,
    t: &[usize],
    noise: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = forward_marginal_batch(x0_latent, t, sched, noise)?;
    let pred = model.predict_noise(&x_t, t, cond)?;
    pred.ensure_same_shape(noise, "training_loss")?;
    let loss = (pred.tensor() - noise.tensor())?.sqr()?.mean_all()?;
    let value = crate::tensor::scalar_f64(&loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("model output"));
    }
    Ok(loss)
}
