//! Convolutional VAE mapping RGB images to a downsampled latent space.

use std::sync::{Arc, RwLock};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::nn::{upsample2x, Conv2d, GroupNorm, ResBlock};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{ensure_finite, LatentTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub base_width: usize,
    pub latent_channels: usize,
    /// Spatial reduction, a power of two.
    pub factor: usize,
    pub kl_weight: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            latent_channels: 4,
            factor: 8,
            kl_weight: 1e-6,
        }
    }
}

impl AutoencoderConfig {
    fn levels(&self) -> Result<usize> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return Err(Error::InvalidConfig(format!("autoencoder factor {} must be a power of two >= 2", self.factor)));
        }
        Ok(self.factor.trailing_zeros() as usize)
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * (1 << level.min(1))
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv2d,
    mid: ResBlock,
    blocks: Vec<ResBlock>,
    ups: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Variational autoencoder. `encode`/`decode` work on scaled latents
/// (`z · latent_scale`); the scale is fitted after training so latents have
/// roughly unit variance.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    enc: Encoder,
    dec: Decoder,
    scale: Arc<RwLock<f64>>,
}

/// Loss terms of one autoencoder batch.
#[derive(Debug, Clone)]
pub struct VaeLoss {
    pub total: Tensor,
    pub recon: f64,
    pub kl: f64,
}

impl Autoencoder {
    pub fn new(store: &ParamStore, config: &AutoencoderConfig) -> Result<Self> {
        let levels = config.levels()?;
        let b = store.builder("autoencoder", ParamGroup::Autoencoder);
        let e = b.pp("enc");
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..levels {
            blocks.push(ResBlock::new(&e.pp(format!("block{l}")), config.width(l), config.width(l), None)?);
            downs.push(Conv2d::new(&e.pp(format!("down{l}")), config.width(l), config.width(l + 1), 3, 2, 1)?);
        }
        let top = config.width(levels);
        let enc = Encoder {
            conv_in: Conv2d::new(&e.pp("conv_in"), 3, config.width(0), 3, 1, 1)?,
            blocks,
            downs,
            mid: ResBlock::new(&e.pp("mid"), top, top, None)?,
            norm_out: GroupNorm::new(&e.pp("norm_out"), 8, top)?,
            conv_out: Conv2d::new(&e.pp("conv_out"), top, 2 * config.latent_channels, 3, 1, 1)?,
        };
        let d = b.pp("dec");
        let mut blocks = Vec::new();
        let mut ups = Vec::new();
        for l in (0..levels).rev() {
            ups.push(Conv2d::new(&d.pp(format!("up{l}")), config.width(l + 1), config.width(l), 3, 1, 1)?);
            blocks.push(ResBlock::new(&d.pp(format!("block{l}")), config.width(l), config.width(l), None)?);
        }
        let dec = Decoder {
            conv_in: Conv2d::new(&d.pp("conv_in"), config.latent_channels, top, 3, 1, 1)?,
            mid: ResBlock::new(&d.pp("mid"), top, top, None)?,
            blocks,
            ups,
            norm_out: GroupNorm::new(&d.pp("norm_out"), 8, config.width(0))?,
            conv_out: Conv2d::new(&d.pp("conv_out"), config.width(0), 3, 3, 1, 1)?,
        };
        Ok(Self {
            config: config.clone(),
            enc,
            dec,
            scale: Arc::new(RwLock::new(1.0)),
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn latent_scale(&self) -> f64 {
        *self.scale.read().expect("scale lock")
    }

    pub fn set_latent_scale(&self, s: f64) -> Result<()> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidConfig(format!("latent scale {s} must be positive")));
        }
        *self.scale.write().expect("scale lock") = s;
        Ok(())
    }

    fn check_image(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        let f = self.config.factor;
        if c != 3 || h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "autoencoder input must be (B, 3, H, W) with H, W multiples of {f}; got {:?}",
                images.dims()
            )));
        }
        Ok(())
    }

    /// Posterior mean and log-variance of the unscaled latent.
    pub fn encode_dist(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_image(images)?;
        let e = &self.enc;
        let mut x = e.conv_in.forward(&((images * 2.0)? - 1.0)?)?;
        for (block, down) in e.blocks.iter().zip(&e.downs) {
            x = down.forward(&block.forward(&x, None)?)?;
        }
        let x = e.mid.forward(&x, None)?;
        let x = e.conv_out.forward(&e.norm_out.forward(&x)?.silu()?)?;
        let c = self.config.latent_channels;
        let mean = x.narrow(1, 0, c)?;
        let logvar = x.narrow(1, c, c)?.clamp(-30.0, 20.0)?;
        Ok((mean, logvar))
    }

    /// Deterministic encoding (posterior mean), scaled.
    pub fn encode(&self, images: &Tensor) -> Result<LatentTensor> {
        let (mean, _) = self.encode_dist(images)?;
        let z = (mean.detach() * self.latent_scale())?;
        ensure_finite(&z, "latent")?;
        LatentTensor::latent(z)
    }

    /// Decoder output for an unscaled latent, in `[0, 1]` units but unclamped.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let d = &self.dec;
        let mut x = d.mid.forward(&d.conv_in.forward(z)?, None)?;
        for (up, block) in d.ups.iter().zip(&d.blocks) {
            x = block.forward(&up.forward(&upsample2x(&x)?)?, None)?;
        }
        let x = d.conv_out.forward(&d.norm_out.forward(&x)?.silu()?)?;
        Ok(((x + 1.0)? * 0.5)?)
    }

    /// Decode a scaled latent to images clamped to `[0, 1]`.
    pub fn decode(&self, latent: &LatentTensor) -> Result<Tensor> {
        latent.ensure_finite("latent")?;
        if latent.channels() != self.config.latent_channels {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: latent.dims().to_vec(),
                rhs: vec![self.config.latent_channels],
            });
        }
        let z = (latent.tensor() / self.latent_scale())?;
        Ok(self.decode_raw(&z)?.clamp(0.0, 1.0)?)
    }

    /// Reconstruction MSE plus weighted KL to N(0, I), both per-element means.
    /// `noise` is the reparameterization draw, shaped like the latent.
    pub fn loss(&self, images: &Tensor, noise: &Tensor) -> Result<VaeLoss> {
        let (mean, logvar) = self.encode_dist(images)?;
        let std = (&logvar * 0.5)?.exp()?;
        let z = (&mean + std.mul(noise)?)?;
        let recon = self.decode_raw(&z)?;
        let recon_loss = (recon - images)?.sqr()?.mean_all()?;
        let kl = kl_divergence(&mean, &logvar)?;
        let total = (&recon_loss + (&kl * self.config.kl_weight)?)?;
        Ok(VaeLoss {
            recon: crate::tensor::scalar_f64(&recon_loss)?,
            kl: crate::tensor::scalar_f64(&kl)?,
            total,
        })
    }
}

/// Mean over elements of `0.5 (μ² + σ² − log σ² − 1)`.
pub fn kl_divergence(mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let term = ((mean.sqr()? + logvar.exp()?)? - logvar)?;
    Ok(((term - 1.0)? * 0.5)?.mean_all()?)
}
