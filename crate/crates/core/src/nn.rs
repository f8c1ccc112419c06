//! Small layer library on top of candle tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::params::{Init, Param, ParamBuilder};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Param,
    bias: Param,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv2d {
    /// Conv with `fan_in`-scaled Gaussian weights and zero bias.
    pub fn new(
        b: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::grouped(b, c_in, c_out, kernel, stride, padding, 1)
    }

    pub fn grouped(
        b: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let fan_in = (c_in / groups) * kernel * kernel;
        let weight = b.get(
            "weight",
            &[c_out, c_in / groups, kernel, kernel],
            Init::Normal((1.0 / fan_in as f64).sqrt()),
        )?;
        let bias = b.get("bias", &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// Zero-initialized conv, used as a gate whose output vanishes until trained.
    pub fn zeros(b: &ParamBuilder, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let weight = b.get("weight", &[c_out, c_in, kernel, kernel], Init::Zeros)?;
        let bias = b.get("bias", &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        })
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn bias(&self) -> &Param {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(
            &self.weight.tensor(),
            self.padding,
            self.stride,
            1,
            self.groups,
        )?;
        let c = self.bias.var().dims()[0];
        Ok(y.broadcast_add(&self.bias.tensor().reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Param,
    bias: Option<Param>,
}

impl Linear {
    pub fn new(b: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = b.get(
            "weight",
            &[d_out, d_in],
            Init::Normal((1.0 / d_in as f64).sqrt()),
        )?;
        let bias = Some(b.get("bias", &[d_out], Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(b: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = b.get(
            "weight",
            &[d_out, d_in],
            Init::Normal((1.0 / d_in as f64).sqrt()),
        )?;
        Ok(Self { weight, bias: None })
    }

    pub fn zeros(b: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = b.get("weight", &[d_out, d_in], Init::Zeros)?;
        let bias = Some(b.get("bias", &[d_out], Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Param> {
        self.bias.as_ref()
    }

    /// Applies to the last dimension of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor().t()?;
        let y = x.broadcast_matmul(&w)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.tensor())?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Param,
    bias: Param,
    eps: f64,
}

impl GroupNorm {
    pub fn new(b: &ParamBuilder, groups: usize, channels: usize) -> Result<Self> {
        let groups = fit_groups(groups, channels);
        Ok(Self {
            groups,
            weight: b.get("weight", &[channels], Init::Ones)?,
            bias: b.get("bias", &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xs = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = xs.mean_keepdim(2)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Pre-activation residual block with an optional timestep-embedding input.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(b: &ParamBuilder, c_in: usize, c_out: usize, temb_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&b.pp("norm1"), 8, c_in)?,
            conv1: Conv2d::new(&b.pp("conv1"), c_in, c_out, 3, 1, 1)?,
            temb: temb_dim.map(|d| Linear::new(&b.pp("temb"), d, c_out)).transpose()?,
            norm2: GroupNorm::new(&b.pp("norm2"), 8, c_out)?,
            conv2: Conv2d::new(&b.pp("conv2"), c_out, c_out, 3, 1, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&b.pp("skip"), c_in, c_out, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(lin), Some(t)) = (&self.temb, temb) {
            let e = lin.forward(&t.silu()?)?;
            let (b, c) = e.dims2()?;
            h = h.broadcast_add(&e.reshape((b, c, 1, 1))?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Largest group count `<= wanted` that divides `channels`.
pub fn fit_groups(wanted: usize, channels: usize) -> usize {
    (1..=wanted.max(1).min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Softmax over the last dimension, stabilized by a detached row maximum.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Scaled dot-product attention `softmax(q kᵀ / √d) v`.
///
/// `q`: (B, Nq, d), `k`: (B, Nk, d), `v`: (B, Nk, dv). Returns the output
/// (B, Nq, dv) and the attention weights (B, Nq, Nk).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (d as f64).sqrt())?;
    let weights = softmax_last_dim(&scores)?;
    let out = weights.matmul(&v.contiguous()?)?;
    Ok((out, weights))
}

/// Sinusoidal embedding of integer timesteps, shape (B, dim).
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let mut row = vec![0.0f64; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// 2-D sinusoidal positional encoding for an `h × w` grid, shape (h·w, dim).
/// The first half of the channels encodes rows, the second half columns.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut data = vec![0.0f64; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for i in 0..quarter {
                let freq = (-(10000f64.ln()) * i as f64 / quarter.max(1) as f64).exp();
                row[i] = (y as f64 * freq).sin();
                row[quarter + i] = (y as f64 * freq).cos();
                row[half + i] = (x as f64 * freq).sin();
                row[half + quarter + i] = (x as f64 * freq).cos();
            }
        }
    }
    Ok(Tensor::from_vec(data, (h * w, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Nearest-neighbour 2× upsampling of a (B, C, H, W) tensor.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

/// (B, C, H, W) → (B, H·W, C).
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// (B, H·W, C) → (B, C, H, W).
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}
