//! Small synthetic corpora and a desk-sized configuration, for tests,
//! examples and quick experiments.

use rand::Rng;

use crate::autoencoder::AutoencoderConfig;
use crate::config::{OptimizerConfig, RunConfig};
use crate::degradation::{Branch, PatchRecord};
use crate::denoiser::DenoiserConfig;
use crate::imaging::{downsample, Image};
use crate::rng::seeded_rng;
use crate::semantic::ExtractorConfig;
use crate::Result;

/// Smooth colour image: a tilted gradient plus a few soft blobs.
pub fn toy_image(size: usize, seed: u64, index: usize) -> Image {
    let mut rng = seeded_rng(seed, &["toy", &index.to_string()]);
    let base: [f32; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let grad: [f32; 2] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.25),
                [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)],
            )
        })
        .collect();
    let s = size as f32;
    Image::from_fn(size, size, |x, y, c| {
        let (u, v) = (x as f32 / s, y as f32 / s);
        let mut val = base[c] + grad[0] * (u - 0.5) + grad[1] * (v - 0.5);
        for (bx, by, r, col) in &blobs {
            let d2 = (u - bx).powi(2) + (v - by).powi(2);
            val += col[c] * (-d2 / (2.0 * r * r)).exp();
        }
        val.clamp(0.0, 1.0)
    })
}

/// `n` HR/LR pairs: smooth HR images and their clean 4× downsamples.
pub fn toy_pairs(n: usize, hr_size: usize, seed: u64) -> Result<Vec<PatchRecord>> {
    (0..n)
        .map(|i| {
            let hr = toy_image(hr_size, seed, i);
            Ok(PatchRecord {
                source_image_id: format!("toy_{i:03}"),
                lr_patch: downsample(&hr, 4)?,
                hr_patch: hr,
                hr_offset: (0, 0),
                branch: Branch::DownsampleOnly,
            })
        })
        .collect()
}

/// A run configuration small enough for a laptop CPU: narrow networks, few
/// sampling steps and a raised fine-tuning learning rate.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 7,
        autoencoder: AutoencoderConfig {
            base_width: 16,
            ..Default::default()
        },
        extractor: ExtractorConfig {
            widths: vec![16, 16, 24, 24],
            out_dim: 16,
            ..Default::default()
        },
        denoiser: DenoiserConfig {
            widths: vec![32, 48, 48],
            temb_dim: 48,
            prompt_dim: 16,
            semantic_dim: 16,
            ..Default::default()
        },
        optimizer: OptimizerConfig {
            steps: 2000,
            lr: 1e-3,
            batch_size: 4,
            autoencoder_steps: 400,
            autoencoder_lr: 2e-3,
            backbone_steps: 200,
            backbone_lr: 1e-3,
            prompt_dropout: 0.1,
            checkpoint_every: 0,
        },
        ..Default::default()
    };
    cfg.sampler.num_steps = 10;
    cfg
}
