//! Latent noise-prediction U-Net with a frozen backbone, a trainable control
//! branch driven by the LR latent, and cross-attention to prompt tokens and
//! semantic tokens at the coarser resolutions.

use std::collections::BTreeSet;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::nn::{attention, from_tokens, timestep_embedding, to_tokens, upsample2x, Conv2d, GroupNorm, Linear, ResBlock};
use crate::params::{ParamBuilder, ParamGroup, ParamStore};
use crate::semantic::SemanticEmbedding;
use crate::tensor::LatentTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub temb_dim: usize,
    /// Levels (indices into `widths`) that carry cross-attention; the middle
    /// block always does.
    pub attn_levels: Vec<usize>,
    pub prompt_dim: usize,
    pub semantic_dim: usize,
    /// Build the LR-conditioned control branch.
    pub control_branch: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: vec![32, 64, 64],
            temb_dim: 64,
            attn_levels: vec![1, 2],
            prompt_dim: 32,
            semantic_dim: 32,
            control_branch: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.latent_channels == 0 {
            return Err(Error::InvalidConfig("denoiser widths and channels must be positive".into()));
        }
        if let Some(l) = self.attn_levels.iter().find(|l| **l >= self.widths.len()) {
            return Err(Error::InvalidConfig(format!("attention level {l} out of range")));
        }
        Ok(())
    }
}

/// Everything the denoiser may be conditioned on. Missing parts simply
/// disable the corresponding path.
#[derive(Debug, Clone, Default)]
pub struct ConditioningBundle {
    pub lr_latent: Option<LatentTensor>,
    /// Prompt tokens (B, N, prompt_dim).
    pub prompt: Option<Tensor>,
    pub semantic: Option<SemanticEmbedding>,
}

impl ConditioningBundle {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(lr_latent: Option<LatentTensor>, prompt: Option<Tensor>, semantic: Option<SemanticEmbedding>) -> Self {
        Self {
            lr_latent,
            prompt,
            semantic,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lr_latent.is_none() && self.prompt.is_none() && self.semantic.is_none()
    }

    pub fn with_prompt(&self, prompt: Option<Tensor>) -> Self {
        Self {
            prompt,
            ..self.clone()
        }
    }

    fn validate(&self, x: &LatentTensor) -> Result<()> {
        if let Some(lr) = &self.lr_latent {
            x.ensure_same_shape(lr, "lr_latent")?;
        }
        let b = x.batch();
        if let Some(p) = &self.prompt {
            let (pb, _, _) = p.dims3()?;
            if pb != b {
                return Err(Error::ShapeMismatch {
                    op: "prompt",
                    lhs: p.dims().to_vec(),
                    rhs: x.dims().to_vec(),
                });
            }
        }
        if let Some(s) = &self.semantic {
            if s.batch() != b {
                return Err(Error::ShapeMismatch {
                    op: "semantic",
                    lhs: s.tokens().dims().to_vec(),
                    rhs: x.dims().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Single-head cross-attention with a zero-initialized output projection,
/// applied residually: `F + W_o · softmax(Q Kᵀ/√d) V`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl CrossAttention {
    pub fn new(b: &ParamBuilder, channels: usize, ctx_dim: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::no_bias(&b.pp("q"), channels, channels)?,
            k: Linear::no_bias(&b.pp("k"), ctx_dim, channels)?,
            v: Linear::no_bias(&b.pp("v"), ctx_dim, channels)?,
            o: Linear::zeros(&b.pp("o"), channels, channels)?,
        })
    }

    /// Attention output before the residual, plus the weights (B, HW, N).
    /// `pos` (N, ctx_dim) is added to the keys only.
    pub fn attend(&self, x: &Tensor, ctx: &Tensor, pos: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let q = self.q.forward(&to_tokens(x)?)?;
        let k_in = match pos {
            Some(p) => ctx.broadcast_add(p)?,
            None => ctx.clone(),
        };
        let k = self.k.forward(&k_in)?;
        let v = self.v.forward(ctx)?;
        let (out, weights) = attention(&q, &k, &v)?;
        let out = self.o.forward(&out)?;
        Ok((from_tokens(&out, h, w)?, weights))
    }

    pub fn forward(&self, x: &Tensor, ctx: Option<&Tensor>, pos: Option<&Tensor>) -> Result<Tensor> {
        match ctx {
            None => Ok(x.clone()),
            Some(c) => Ok((x + self.attend(x, c, pos)?.0)?),
        }
    }
}

/// Prompt cross-attention followed by semantic cross-attention.
#[derive(Debug, Clone)]
pub struct AttnPair {
    pub pca: CrossAttention,
    pub sca: CrossAttention,
}

impl AttnPair {
    fn new(b: &ParamBuilder, channels: usize, cfg: &DenoiserConfig) -> Result<Self> {
        Ok(Self {
            pca: CrossAttention::new(&b.pp("pca"), channels, cfg.prompt_dim)?,
            sca: CrossAttention::new(&b.pp("sca"), channels, cfg.semantic_dim)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Context) -> Result<Tensor> {
        let x = self.pca.forward(x, ctx.prompt.as_ref(), None)?;
        self.sca.forward(&x, ctx.semantic.as_ref(), ctx.semantic_pos.as_ref())
    }
}

struct Context {
    prompt: Option<Tensor>,
    semantic: Option<Tensor>,
    semantic_pos: Option<Tensor>,
}

#[derive(Debug, Clone)]
struct DownLevel {
    res: ResBlock,
    ds: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    res: ResBlock,
    us: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct Backbone {
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    downs: Vec<DownLevel>,
    mid1: ResBlock,
    mid2: ResBlock,
    ups: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

#[derive(Debug, Clone)]
struct ControlBranch {
    conv_in: Conv2d,
    hint: Conv2d,
    downs: Vec<DownLevel>,
    mid1: ResBlock,
    zero: Vec<Conv2d>,
    zero_mid: Conv2d,
}

fn down_levels(b: &ParamBuilder, cfg: &DenoiserConfig) -> Result<Vec<DownLevel>> {
    let w = &cfg.widths;
    let mut out = Vec::with_capacity(w.len());
    let mut prev = w[0];
    for (l, &c) in w.iter().enumerate() {
        let p = b.pp(format!("down{l}"));
        out.push(DownLevel {
            res: ResBlock::new(&p.pp("res"), prev, c, Some(cfg.temb_dim))?,
            ds: if l + 1 < w.len() {
                Some(Conv2d::new(&p.pp("ds"), c, c, 3, 2, 1)?)
            } else {
                None
            },
        });
        prev = c;
    }
    Ok(out)
}

fn crop_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    if xh == h && xw == w {
        Ok(x.clone())
    } else {
        Ok(x.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    backbone: Backbone,
    control: Option<ControlBranch>,
    down_attn: Vec<Option<AttnPair>>,
    mid_attn: AttnPair,
    up_attn: Vec<Option<AttnPair>>,
}

pub const BACKBONE_PREFIX: &str = "denoiser.backbone";
pub const CONTROL_PREFIX: &str = "denoiser.control";

impl Denoiser {
    pub fn new(store: &ParamStore, config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let lc = config.latent_channels;
        let bb = store.builder(BACKBONE_PREFIX, ParamGroup::Backbone);
        let mut ups = Vec::with_capacity(w.len());
        let mut cur = *w.last().unwrap();
        for l in (0..w.len()).rev() {
            let p = bb.pp(format!("up{l}"));
            ups.push(UpLevel {
                res: ResBlock::new(&p.pp("res"), cur + w[l], w[l], Some(config.temb_dim))?,
                us: if l > 0 {
                    Some(Conv2d::new(&p.pp("us"), w[l], w[l], 3, 1, 1)?)
                } else {
                    None
                },
            });
            cur = w[l];
        }
        let top = *w.last().unwrap();
        let backbone = Backbone {
            temb1: Linear::new(&bb.pp("temb1"), w[0], config.temb_dim)?,
            temb2: Linear::new(&bb.pp("temb2"), config.temb_dim, config.temb_dim)?,
            conv_in: Conv2d::new(&bb.pp("conv_in"), lc, w[0], 3, 1, 1)?,
            downs: down_levels(&bb, config)?,
            mid1: ResBlock::new(&bb.pp("mid1"), top, top, Some(config.temb_dim))?,
            mid2: ResBlock::new(&bb.pp("mid2"), top, top, Some(config.temb_dim))?,
            ups,
            norm_out: GroupNorm::new(&bb.pp("norm_out"), 8, w[0])?,
            conv_out: Conv2d::zeros(&bb.pp("conv_out"), w[0], lc, 3)?,
        };

        let cb = store.builder(CONTROL_PREFIX, ParamGroup::Control);
        let control = if !config.control_branch {
            None
        } else {
            Some(ControlBranch {
            conv_in: Conv2d::new(&cb.pp("conv_in"), lc, w[0], 3, 1, 1)?,
            hint: Conv2d::new(&cb.pp("hint"), lc, w[0], 3, 1, 1)?,
            downs: down_levels(&cb, config)?,
            mid1: ResBlock::new(&cb.pp("mid1"), top, top, Some(config.temb_dim))?,
            zero: w
                .iter()
                .enumerate()
                .map(|(l, &c)| Conv2d::zeros(&cb.pp(format!("zero{l}")), c, c, 1))
                .collect::<Result<_>>()?,
            zero_mid: Conv2d::zeros(&cb.pp("zero_mid"), top, top, 1)?,
        })
        };

        let ab = store.builder("denoiser.attn", ParamGroup::Attention);
        let levels: BTreeSet<usize> = config.attn_levels.iter().copied().collect();
        let pair_at = |name: String, l: usize| -> Result<Option<AttnPair>> {
            if levels.contains(&l) {
                Ok(Some(AttnPair::new(&ab.pp(name), w[l], config)?))
            } else {
                Ok(None)
            }
        };
        let down_attn = (0..w.len()).map(|l| pair_at(format!("down{l}"), l)).collect::<Result<_>>()?;
        let up_attn = (0..w.len()).rev().map(|l| pair_at(format!("up{l}"), l)).collect::<Result<_>>()?;
        let mid_attn = AttnPair::new(&ab.pp("mid"), top, config)?;
        Ok(Self {
            config: config.clone(),
            backbone,
            control,
            down_attn,
            mid_attn,
            up_attn,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Copy every backbone weight that has a same-named control counterpart,
    /// so the control branch starts as a replica of the backbone encoder.
    pub fn init_control_from_backbone(store: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for name in store.names() {
            if let Some(rest) = name.strip_prefix(CONTROL_PREFIX) {
                let src = format!("{BACKBONE_PREFIX}{rest}");
                if store.group_of(&src).is_some() {
                    store.restore(&name, &store.get(&src)?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    /// Every cross-attention module, in forward order.
    pub fn attention_pairs(&self) -> Vec<&AttnPair> {
        self.down_attn
            .iter()
            .flatten()
            .chain(std::iter::once(&self.mid_attn))
            .chain(self.up_attn.iter().flatten())
            .collect()
    }

    pub fn has_control(&self) -> bool {
        self.control.is_some()
    }

    fn control_residuals(c: &ControlBranch, x: &Tensor, hint: &Tensor, temb: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut h = (c.conv_in.forward(x)? + c.hint.forward(hint)?)?;
        let mut res = Vec::with_capacity(c.downs.len());
        for (lvl, zero) in c.downs.iter().zip(&c.zero) {
            h = lvl.res.forward(&h, Some(temb))?;
            res.push(zero.forward(&h)?);
            if let Some(ds) = &lvl.ds {
                h = ds.forward(&h)?;
            }
        }
        let h = c.mid1.forward(&h, Some(temb))?;
        Ok((res, c.zero_mid.forward(&h)?))
    }

    /// Predicted noise. With `use_control = false` the control branch is
    /// skipped and the LR latent ignored (the no-control ablation, also used
    /// for unconditional backbone pretraining).
    pub fn forward(
        &self,
        x_t: &LatentTensor,
        t: &[usize],
        cond: &ConditioningBundle,
        use_control: bool,
    ) -> Result<LatentTensor> {
        if x_t.channels() != self.config.latent_channels {
            return Err(Error::ShapeMismatch {
                op: "denoiser input",
                lhs: x_t.dims().to_vec(),
                rhs: vec![self.config.latent_channels],
            });
        }
        if t.len() != x_t.batch() {
            return Err(Error::ShapeMismatch {
                op: "timesteps",
                lhs: vec![t.len()],
                rhs: vec![x_t.batch()],
            });
        }
        cond.validate(x_t)?;
        let dtype = x_t.dtype();
        let bb = &self.backbone;
        let x = x_t.tensor();

        let temb = timestep_embedding(t, self.config.widths[0], dtype)?;
        let temb = bb.temb2.forward(&bb.temb1.forward(&temb)?.silu()?)?;

        let ctx = Context {
            prompt: cond.prompt.as_ref().map(|p| p.to_dtype(dtype)).transpose()?,
            semantic: cond
                .semantic
                .as_ref()
                .map(|s| s.tokens().to_dtype(dtype))
                .transpose()?,
            semantic_pos: cond
                .semantic
                .as_ref()
                .map(|s| s.positions().and_then(|p| Ok(p.to_dtype(dtype)?)))
                .transpose()?,
        };

        let control = match (&self.control, use_control) {
            (Some(c), true) => {
                let lr = cond.lr_latent.as_ref().ok_or(Error::MissingCondition("lr_latent"))?;
                Some(Self::control_residuals(c, x, lr.tensor(), &temb)?)
            }
            _ => None,
        };

        let mut h = bb.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(bb.downs.len());
        for (l, lvl) in bb.downs.iter().enumerate() {
            h = lvl.res.forward(&h, Some(&temb))?;
            if let Some(attn) = &self.down_attn[l] {
                h = attn.forward(&h, &ctx)?;
            }
            let skip = match &control {
                Some((res, _)) => (&h + &res[l])?,
                None => h.clone(),
            };
            skips.push(skip);
            if let Some(ds) = &lvl.ds {
                h = ds.forward(&h)?;
            }
        }
        h = bb.mid1.forward(&h, Some(&temb))?;
        h = self.mid_attn.forward(&h, &ctx)?;
        h = bb.mid2.forward(&h, Some(&temb))?;
        if let Some((_, mid)) = &control {
            h = (h + mid)?;
        }
        for (i, lvl) in bb.ups.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, sh, sw) = skip.dims4()?;
            h = crop_to(&h, sh, sw)?;
            h = lvl.res.forward(&Tensor::cat(&[&h, &skip], 1)?, Some(&temb))?;
            if let Some(attn) = &self.up_attn[i] {
                h = attn.forward(&h, &ctx)?;
            }
            if let Some(us) = &lvl.us {
                h = us.forward(&upsample2x(&h)?)?;
            }
        }
        let out = bb.conv_out.forward(&bb.norm_out.forward(&h)?.silu()?)?;
        LatentTensor::latent(out)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &LatentTensor, t: &[usize], cond: &ConditioningBundle) -> Result<LatentTensor> {
        self.forward(x_t, t, cond, true)
    }
}

/// The denoiser with its control branch switched off.
pub struct WithoutControl<'a>(pub &'a Denoiser);

impl NoisePredictor for WithoutControl<'_> {
    fn predict_noise(&self, x_t: &LatentTensor, t: &[usize], cond: &ConditioningBundle) -> Result<LatentTensor> {
        self.0.forward(x_t, t, cond, false)
    }
}

/// Parameters optimized during fine-tuning: the control branch and every
/// prompt/semantic cross-attention block.
pub fn trainable_parameters(store: &ParamStore) -> Vec<(String, candle_core::Var)> {
    store.params_in(&TRAINABLE_GROUPS)
}

pub const TRAINABLE_GROUPS: [ParamGroup; 2] = [ParamGroup::Control, ParamGroup::Attention];
