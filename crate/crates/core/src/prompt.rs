//! Text conditioning: fixed prompt strings, a deterministic image tagger and
//! a hashing phrase encoder that turns prompts into token embeddings.

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, StandardNormal};

use crate::imaging::Image;
use crate::rng::seeded_rng;
use crate::Result;

pub const POSITIVE_PROMPT: &str = "clean, high-resolution, 8K, ultra-detailed, ultra-realistic";
pub const NEGATIVE_PROMPT: &str =
    "dotted, noise, blur, low-resolution, smooth, unrealistic physics, unnatural shadows";

/// Which extra prompt accompanies the tagger output at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSet {
    #[default]
    None,
    Positive,
    Negative,
}

impl PromptSet {
    pub fn text(&self) -> Option<&'static str> {
        match self {
            PromptSet::None => None,
            PromptSet::Positive => Some(POSITIVE_PROMPT),
            PromptSet::Negative => Some(NEGATIVE_PROMPT),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptSet::None => "none",
            PromptSet::Positive => "positive",
            PromptSet::Negative => "negative",
        }
    }
}

impl std::str::FromStr for PromptSet {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PromptSet::None),
            "positive" => Ok(PromptSet::Positive),
            "negative" => Ok(PromptSet::Negative),
            other => Err(crate::Error::InvalidConfig(format!("unknown prompt set {other:?}"))),
        }
    }
}

/// Describes an LR image with four coarse tags: brightness, colourfulness,
/// texture and colour temperature.
pub fn tag_image(img: &Image) -> Vec<String> {
    let (w, h) = (img.width(), img.height());
    let n = (w * h).max(1) as f64;
    let mut luma_sum = 0.0;
    let mut sat_sum = 0.0;
    let mut warm_sum = 0.0;
    let mut grad_sum = 0.0;
    let luma = |x: usize, y: usize| {
        0.299 * img.get(x, y, 0) as f64 + 0.587 * img.get(x, y, 1) as f64 + 0.114 * img.get(x, y, 2) as f64
    };
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (img.get(x, y, 0) as f64, img.get(x, y, 1) as f64, img.get(x, y, 2) as f64);
            luma_sum += luma(x, y);
            sat_sum += r.max(g).max(b) - r.min(g).min(b);
            warm_sum += r - b;
            if x + 1 < w {
                grad_sum += (luma(x + 1, y) - luma(x, y)).abs();
            }
            if y + 1 < h {
                grad_sum += (luma(x, y + 1) - luma(x, y)).abs();
            }
        }
    }
    let brightness = match luma_sum / n {
        v if v < 0.33 => "dark",
        v if v > 0.66 => "bright",
        _ => "mid-tone",
    };
    let colour = if sat_sum / n > 0.2 { "colorful" } else { "muted" };
    let texture = if grad_sum / n > 0.08 { "textured" } else { "smooth" };
    let warmth = match warm_sum / n {
        v if v > 0.05 => "warm",
        v if v < -0.05 => "cool",
        _ => "neutral",
    };
    [brightness, colour, texture, warmth].iter().map(|s| s.to_string()).collect()
}

/// Split a comma-separated prompt into trimmed, lower-cased phrases.
pub fn phrases(prompt: &str) -> Vec<String> {
    prompt
        .split(',')
        .map(|p| p.trim().to_lowercase())
        .filter(|p| !p.is_empty())
        .collect()
}

/// Maps each phrase to a fixed Gaussian vector derived from its hash, so the
/// same phrase always yields the same token.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    dim: usize,
    seed: u64,
}

impl PromptEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phrase_vector(&self, phrase: &str) -> Vec<f64> {
        let mut rng = seeded_rng(self.seed, &["phrase", phrase]);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Encode one token list per batch item; shorter lists are padded by
    /// repeating their last token. Returns `None` when every list is empty.
    pub fn encode(&self, batch: &[Vec<String>], dtype: DType) -> Result<Option<Tensor>> {
        let n = batch.iter().map(Vec::len).max().unwrap_or(0);
        if n == 0 {
            return Ok(None);
        }
        if batch.iter().any(Vec::is_empty) {
            return Err(crate::Error::InvalidInput(
                "cannot mix empty and non-empty prompts in one batch".into(),
            ));
        }
        let mut data = Vec::with_capacity(batch.len() * n * self.dim);
        for items in batch {
            for i in 0..n {
                data.extend(self.phrase_vector(&items[i.min(items.len() - 1)]));
            }
        }
        Ok(Some(
            Tensor::from_vec(data, (batch.len(), n, self.dim), &Device::Cpu)?.to_dtype(dtype)?,
        ))
    }
}
