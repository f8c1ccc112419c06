//! Frozen semantic feature extractor: patchify stem, four multi-scale blocks
//! (local depthwise convolution plus windowed self-attention) and a
//! top-down feature neck. The finest neck output is the semantic condition.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{attention, from_tokens, sinusoidal_2d, to_tokens, upsample2x, Conv2d, GroupNorm, Linear};
use crate::params::{ParamBuilder, ParamGroup, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Stage widths, finest first.
    pub widths: Vec<usize>,
    /// Stem patch size (stride of the patchify convolution).
    pub patch: usize,
    /// Attention window side; falls back to global attention when the
    /// feature map does not tile.
    pub window: usize,
    /// Channel width of the neck outputs and the semantic tokens.
    pub out_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 24, 32, 32],
            patch: 4,
            window: 4,
            out_dim: 32,
        }
    }
}

/// Semantic tokens (B, h·w, dim) on an `h × w` grid.
#[derive(Debug, Clone)]
pub struct SemanticEmbedding {
    tokens: Tensor,
    h: usize,
    w: usize,
}

impl SemanticEmbedding {
    pub fn new(tokens: Tensor, h: usize, w: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != h * w {
            return Err(Error::ShapeMismatch {
                op: "semantic_embedding",
                lhs: vec![n],
                rhs: vec![h, w],
            });
        }
        Ok(Self { tokens, h, w })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    /// Positional encoding matching the token grid, shape (h·w, dim).
    pub fn positions(&self) -> Result<Tensor> {
        sinusoidal_2d(self.h, self.w, self.dim(), self.tokens.dtype())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            tokens: self.tokens.to_dtype(dtype)?,
            h: self.h,
            w: self.w,
        })
    }

    /// Concatenate along the batch dimension.
    pub fn cat(items: &[&SemanticEmbedding]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidInput("no embeddings to concatenate".into()))?;
        if items.iter().any(|e| e.grid() != first.grid()) {
            return Err(Error::InvalidInput("semantic grids differ".into()));
        }
        let ts: Vec<&Tensor> = items.iter().map(|e| &e.tokens).collect();
        Self::new(Tensor::cat(&ts, 0)?, first.h, first.w)
    }
}

#[derive(Debug, Clone)]
struct WindowAttention {
    norm: GroupNorm,
    qkv: Linear,
    proj: Linear,
    window: usize,
}

impl WindowAttention {
    fn new(b: &ParamBuilder, c: usize, window: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&b.pp("norm"), 8, c)?,
            qkv: Linear::new(&b.pp("qkv"), c, 3 * c)?,
            proj: Linear::new(&b.pp("proj"), c, c)?,
            window,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let ws = self.window;
        let windowed = ws > 0 && h % ws == 0 && w % ws == 0 && (h > ws || w > ws);
        let xn = self.norm.forward(x)?;
        let tokens = if windowed {
            xn.reshape((b, c, h / ws, ws, w / ws, ws))?
                .permute((0, 2, 4, 3, 5, 1))?
                .contiguous()?
                .reshape((b * (h / ws) * (w / ws), ws * ws, c))?
        } else {
            to_tokens(&xn)?
        };
        let qkv = self.qkv.forward(&tokens)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let (out, _) = attention(&q, &k, &v)?;
        let out = self.proj.forward(&out)?;
        let out = if windowed {
            out.reshape((b, h / ws, w / ws, ws, ws, c))?
                .permute((0, 5, 1, 3, 2, 4))?
                .contiguous()?
                .reshape((b, c, h, w))?
        } else {
            from_tokens(&out, h, w)?
        };
        Ok((x + out)?)
    }
}

/// Multi-scale block: depthwise-pointwise local branch, then windowed attention.
#[derive(Debug, Clone)]
struct MsBlock {
    depthwise: Conv2d,
    pointwise: Conv2d,
    attn: WindowAttention,
}

impl MsBlock {
    fn new(b: &ParamBuilder, c: usize, window: usize) -> Result<Self> {
        Ok(Self {
            depthwise: Conv2d::grouped(&b.pp("dw"), c, c, 3, 1, 1, c)?,
            pointwise: Conv2d::new(&b.pp("pw"), c, c, 1, 1, 0)?,
            attn: WindowAttention::new(&b.pp("attn"), c, window)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let local = self.pointwise.forward(&self.depthwise.forward(x)?.gelu()?)?;
        self.attn.forward(&(x + local)?)
    }
}

#[derive(Debug, Clone)]
pub struct SemanticExtractor {
    config: ExtractorConfig,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    blocks: Vec<MsBlock>,
    laterals: Vec<Conv2d>,
}

impl SemanticExtractor {
    pub fn new(store: &ParamStore, config: &ExtractorConfig) -> Result<Self> {
        if config.widths.is_empty() || config.patch == 0 || config.out_dim == 0 {
            return Err(Error::InvalidConfig("extractor needs widths, patch and out_dim".into()));
        }
        let b = store.builder("extractor", ParamGroup::Extractor);
        let w = &config.widths;
        let stem = Conv2d::new(&b.pp("stem"), 3, w[0], config.patch, config.patch, 0)?;
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        let mut laterals = Vec::new();
        for (i, &c) in w.iter().enumerate() {
            if i > 0 {
                downs.push(Conv2d::new(&b.pp(format!("down{i}")), w[i - 1], c, 3, 2, 1)?);
            }
            blocks.push(MsBlock::new(&b.pp(format!("stage{i}")), c, config.window)?);
            laterals.push(Conv2d::new(&b.pp(format!("lateral{i}")), c, config.out_dim, 1, 1, 0)?);
        }
        Ok(Self {
            config: config.clone(),
            stem,
            downs,
            blocks,
            laterals,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// Backbone stage outputs, finest first. Input is an image batch in `[0, 1]`.
    pub fn stages(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::InvalidInput(format!("extractor expects 3 channels, got {c}")));
        }
        if h < self.config.patch || w < self.config.patch {
            return Err(Error::InvalidInput(format!(
                "image {h}x{w} smaller than extractor patch {}",
                self.config.patch
            )));
        }
        let x = ((images * 2.0)? - 1.0)?;
        let mut x = self.stem.forward(&x)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                x = self.downs[i - 1].forward(&x)?;
            }
            x = block.forward(&x)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Neck outputs (B, out_dim, h_i, w_i), finest first.
    pub fn pyramid(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let stages = self.stages(images)?;
        let mut outs: Vec<Tensor> = Vec::with_capacity(stages.len());
        let mut top: Option<Tensor> = None;
        for (i, s) in stages.iter().enumerate().rev() {
            let lat = self.laterals[i].forward(s)?;
            let cur = match top {
                None => lat,
                Some(t) => {
                    let (_, _, h, w) = lat.dims4()?;
                    let up = upsample2x(&t)?.narrow(2, 0, h)?.narrow(3, 0, w)?;
                    (lat + up)?
                }
            };
            outs.push(cur.clone());
            top = Some(cur);
        }
        outs.reverse();
        Ok(outs)
    }

    /// Finest neck level as semantic tokens.
    pub fn embed(&self, images: &Tensor) -> Result<SemanticEmbedding> {
        let pyr = self.pyramid(images)?;
        let finest = pyr[0].detach();
        let (_, _, h, w) = finest.dims4()?;
        SemanticEmbedding::new(to_tokens(&finest)?, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn extractor(dtype: DType) -> SemanticExtractor {
        let store = ParamStore::new(dtype, 4);
        SemanticExtractor::new(&store, &ExtractorConfig::default()).unwrap()
    }

    #[test]
    fn pyramid_shapes_odd_sizes() {
        let e = extractor(DType::F32);
        let x = Tensor::rand(0f32, 1.0, (2, 3, 36, 28), &Device::Cpu).unwrap();
        let pyr = e.pyramid(&x).unwrap();
        let dims: Vec<_> = pyr.iter().map(|p| p.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![vec![2, 32, 9, 7], vec![2, 32, 5, 4], vec![2, 32, 3, 2], vec![2, 32, 2, 1]]
        );
        let emb = e.embed(&x).unwrap();
        assert_eq!(emb.grid(), (9, 7));
        assert_eq!(emb.tokens().dims(), &[2, 63, 32]);
    }

    #[test]
    fn windowed_path_matches_per_window_global() {
        // Each 4x4 window of an 8x8 map must attend only within itself.
        let store = ParamStore::new(DType::F64, 1);
        let wa = WindowAttention::new(&store.builder("w", ParamGroup::Extractor), 8, 4).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 8, 8, 8), &Device::Cpu).unwrap();
        let full = wa.forward(&x).unwrap();
        let store2 = ParamStore::new(DType::F64, 1);
        let global = WindowAttention::new(&store2.builder("w", ParamGroup::Extractor), 8, 0).unwrap();
        let tl = x.narrow(2, 0, 4).unwrap().narrow(3, 4, 4).unwrap();
        // Group norm statistics are per-image, so compare with the norm
        // computed over the full map: feed the full map through the norm first.
        let xn = global.norm.forward(&x).unwrap().narrow(2, 0, 4).unwrap().narrow(3, 4, 4).unwrap();
        let t = to_tokens(&xn).unwrap();
        let qkv = global.qkv.forward(&t).unwrap();
        let (o, _) = attention(
            &qkv.narrow(2, 0, 8).unwrap(),
            &qkv.narrow(2, 8, 8).unwrap(),
            &qkv.narrow(2, 16, 8).unwrap(),
        )
        .unwrap();
        let o = from_tokens(&global.proj.forward(&o).unwrap(), 4, 4).unwrap();
        let expect = (tl + o).unwrap();
        let got = full.narrow(2, 0, 4).unwrap().narrow(3, 4, 4).unwrap();
        let diff = (expect - got).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-10, "diff {diff}");
    }

    #[test]
    fn deterministic_and_frozen_group() {
        let a = extractor(DType::F32);
        let b = extractor(DType::F32);
        let x = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let ea = a.embed(&x).unwrap().tokens().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let eb = b.embed(&x).unwrap().tokens().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn rejects_tiny_input() {
        let e = extractor(DType::F32);
        let x = Tensor::zeros((1, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(e.embed(&x).is_err());
    }
}
