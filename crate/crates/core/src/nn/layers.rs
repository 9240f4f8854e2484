//! Building blocks shared by every network in the crate.
//!
//! Layers store parameter names, not tensors. Each forward pass fetches its
//! weights from the [`ParamStore`], so freezing a partition takes effect
//! immediately without rebuilding the model.

use candle_core::{DType, Tensor, D};

use super::conv::conv2d;
use super::params::{Init, ParamStore, Scope};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(scope, in_dim, out_dim, bias, Init::Kaiming { fan_in: in_dim, gain: 1.0 })
    }

    pub fn with_init(scope: &mut Scope<'_>, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = scope.register("weight", &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(scope.register("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.dim(D::Minus1)? != self.in_dim {
            return Err(Error::shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim,
                x.dims()
            )));
        }
        let w = ps.fetch(&self.weight)?;
        let y = x.broadcast_matmul(&w.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&ps.fetch(b)?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    c_in: usize,
    c_out: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// Square kernel `k` with "same" padding for odd `k` at stride 1.
    pub fn new(scope: &mut Scope<'_>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_init(
            scope,
            c_in,
            c_out,
            k,
            stride,
            Init::Kaiming {
                fan_in: c_in * k * k,
                gain: 1.0,
            },
        )
    }

    pub fn zeros(scope: &mut Scope<'_>, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::with_init(scope, c_in, c_out, k, 1, Init::Zeros)
    }

    pub fn with_init(
        scope: &mut Scope<'_>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = scope.register("weight", &[c_out, c_in, k, k], init)?;
        let bias = Some(scope.register("bias", &[c_out], Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
            stride,
            pad: k / 2,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &ps.fetch(&self.weight)?, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&ps.fetch(b)?.reshape((1, self.c_out, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Group normalization with a learned per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: String,
    beta: String,
    groups: usize,
    channels: usize,
}

impl GroupNorm {
    pub fn new(scope: &mut Scope<'_>, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(format!("{channels} channels do not split into {groups} groups")));
        }
        Ok(Self {
            gamma: scope.register("gamma", &[channels], Init::Const(1.0))?,
            beta: scope.register("beta", &[channels], Init::Zeros)?,
            groups,
            channels,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!("group norm expects {} channels, got {c}", self.channels)));
        }
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        let gamma = ps.fetch(&self.gamma)?.reshape((1, c, 1, 1))?;
        let beta = ps.fetch(&self.beta)?.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Multi-head scaled dot-product attention over token sequences.
///
/// With `context = None` this is self-attention. The key/value/output
/// projections carry no bias, so an all-zero context produces an exactly
/// zero output.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(scope: &mut Scope<'_>, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("attention width {dim} does not split into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&mut scope.sub("q"), dim, dim, false)?,
            k: Linear::new(&mut scope.sub("k"), context_dim, dim, false)?,
            v: Linear::new(&mut scope.sub("v"), context_dim, dim, false)?,
            out: Linear::new(&mut scope.sub("out"), dim, dim, false)?,
            heads,
            dim,
        })
    }

    /// `x`: `(B, N, dim)`, `context`: `(B, M, context_dim)`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let ctx = context.unwrap_or(x);
        let (b, n, _) = x.dims3()?;
        let m = ctx.dim(1)?;
        let hd = self.dim / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(ps, x)?, n)?;
        let k = split(self.k.forward(ps, ctx)?, m)?;
        let v = split(self.v.forward(ps, ctx)?, m)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let y = softmax_last(&scores)?.matmul(&v)?;
        let y = y.transpose(1, 2)?.reshape((b, n, self.dim))?;
        self.out.forward(ps, &y)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?)
}

/// Mean over non-overlapping `factor × factor` blocks.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("{h}x{w} does not pool by {factor}")));
    }
    Ok(x.reshape((b, c, h / factor, factor, w / factor, factor))?
        .mean(5)?
        .mean(3)?)
}

/// `(B, C, H, W)` to `(B, H·W, C)` tokens.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens do not fill {h}x{w}")));
    }
    Ok(t.transpose(1, 2)?.reshape((b, c, h, w))?)
}

/// Sinusoidal embedding of diffusion timesteps, `(B,)` to `(B, dim)`.
pub fn timestep_embedding(t: &[f64], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            out.push((ti * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            out.push((ti * freq).sin());
        }
        if dim % 2 == 1 {
            out.push(0.0);
        }
    }
    Ok(Tensor::from_vec(out, (t.len(), dim), device)?.to_dtype(dtype)?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("mse shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Partition;
    use candle_core::Device;

    fn store() -> ParamStore {
        ParamStore::new(DType::F64, Device::Cpu, 3)
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f64, 2.0, 3.0], [-1000.0, 0.0, 1000.0]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in &s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let e: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in s[0].iter().zip(&e) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_context_gives_zero_attention() {
        let mut ps = store();
        let attn = Attention::new(&mut ps.root(Partition::CrossAttn).sub("a"), 8, 4, 2).unwrap();
        let x = Tensor::ones((2, 5, 8), DType::F64, &Device::Cpu).unwrap();
        let ctx = Tensor::zeros((2, 3, 4), DType::F64, &Device::Cpu).unwrap();
        let y: Vec<f64> = attn.forward(&ps, &x, Some(&ctx)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = Tensor::arange(0f64, 24.0, &Device::Cpu).unwrap().reshape((1, 2, 3, 4)).unwrap();
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(up.dims4().unwrap(), (1, 2, 6, 8));
        let up_v: Vec<f64> = up.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(up_v[8 + 2], 1.0);
        let back = avg_pool(&up, 2).unwrap();
        let d = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut ps = store();
        let gn = GroupNorm::new(&mut ps.root(Partition::Base).sub("gn"), 2, 4).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((1, 4, 2, 4)).unwrap();
        let y = gn.forward(&ps, &x).unwrap().reshape((2, 16)).unwrap();
        let mean: Vec<f64> = y.mean(1).unwrap().to_vec1().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::arange(0f64, 24.0, &Device::Cpu).unwrap().reshape((1, 2, 3, 4)).unwrap();
        let back = from_tokens(&to_tokens(&x).unwrap(), 3, 4).unwrap();
        let d = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }
}
