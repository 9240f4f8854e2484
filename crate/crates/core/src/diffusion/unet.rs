//! A small pixel-space U-Net.
//!
//! Input is the noisy target concatenated with the source image. Each level
//! runs one residual block followed by a cross-attention block; the lowest
//! resolution adds self-attention between two residual blocks. Control
//! residues are added to the encoder activations at the end of every level
//! and after the middle block.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::conditioning::InjectionPoint;
use crate::nn::layers::{from_tokens, timestep_embedding, to_tokens, upsample_nearest};
use crate::nn::{Attention, Conv2d, GroupNorm, Linear, ParamStore, Partition, Scope};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    /// Width multiplier per resolution level, finest first.
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub heads: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            groups: 8,
            heads: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    /// Total spatial reduction between the input and the lowest level.
    pub fn reduction(&self) -> usize {
        1 << (self.channel_mults.len().saturating_sub(1))
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(s: &mut Scope<'_>, c_in: usize, c_out: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut s.sub("norm1"), groups, c_in)?,
            conv1: Conv2d::new(&mut s.sub("conv1"), c_in, c_out, 3, 1)?,
            temb: Linear::new(&mut s.sub("temb"), time_dim, c_out, true)?,
            norm2: GroupNorm::new(&mut s.sub("norm2"), groups, c_out)?,
            conv2: Conv2d::new(&mut s.sub("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv2d::new(&mut s.sub("skip"), c_in, c_out, 1, 1)?)
            },
        })
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(ps, &self.norm1.forward(ps, x)?.silu()?)?;
        let (b, c, _, _) = h.dims4()?;
        let t = self.temb.forward(ps, temb)?.reshape((b, c, 1, 1))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(ps, &self.norm2.forward(ps, &h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(ps, x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// `x + Attn(GN(x), context)` over the spatial tokens of `x`.
struct AttnBlock {
    norm: GroupNorm,
    attn: Attention,
}

impl AttnBlock {
    fn new(s: &mut Scope<'_>, channels: usize, context_dim: usize, cfg: &DenoiserConfig) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut s.sub("norm"), cfg.groups, channels)?,
            attn: Attention::new(&mut s.sub("attn"), channels, context_dim, cfg.heads)?,
        })
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let tokens = to_tokens(&self.norm.forward(ps, x)?)?;
        let y = self.attn.forward(ps, &tokens, context)?;
        Ok((x + from_tokens(&y, h, w)?)?)
    }
}

/// Everything the conditioned denoiser consumes beyond `(x_t, source, t)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Guidance<'a> {
    /// One residue per [`Denoiser::injection_points`] entry.
    pub residues: Option<&'a [Tensor]>,
    /// `(B, n_tok, d_emb)` cross-attention context.
    pub context: Option<&'a Tensor>,
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    time_dim: usize,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    down: Vec<ResBlock>,
    down_cross: Vec<AttnBlock>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_self: AttnBlock,
    mid_cross: AttnBlock,
    mid2: ResBlock,
    up: Vec<ResBlock>,
    up_cross: Vec<AttnBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    /// Base weights live in the base partition under `scope`; cross-attention
    /// blocks in the cross-attention partition.
    pub fn new(scope: &mut Scope<'_>, cfg: &DenoiserConfig, context_dim: usize) -> Result<Self> {
        if cfg.channel_mults.is_empty() || cfg.base_channels == 0 || cfg.image_channels == 0 {
            return Err(Error::invalid("denoiser needs at least one level and positive widths"));
        }
        let widths = cfg.widths();
        let c0 = widths[0];
        let time_dim = 4 * c0;
        let g = cfg.groups;
        let mut base = scope.with_partition("unet", Partition::Base);
        let conv_in = Conv2d::new(&mut base.sub("conv_in"), 2 * cfg.image_channels, c0, 3, 1)?;
        let time1 = Linear::new(&mut base.sub("time1"), c0, time_dim, true)?;
        let time2 = Linear::new(&mut base.sub("time2"), time_dim, time_dim, true)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = c0;
        for (i, &c) in widths.iter().enumerate() {
            down.push(ResBlock::new(&mut base.sub(&format!("down{i}")), prev, c, time_dim, g)?);
            if i + 1 < widths.len() {
                downsample.push(Conv2d::new(&mut base.sub(&format!("downsample{i}")), c, c, 3, 2)?);
            }
            prev = c;
        }
        let c_low = *widths.last().expect("non-empty");
        let mid1 = ResBlock::new(&mut base.sub("mid1"), c_low, c_low, time_dim, g)?;
        let mid_self = AttnBlock::new(&mut base.sub("mid_self"), c_low, c_low, cfg)?;
        let mid2 = ResBlock::new(&mut base.sub("mid2"), c_low, c_low, time_dim, g)?;
        let mut up = Vec::new();
        let mut cur = c_low;
        for (i, &c) in widths.iter().enumerate().rev() {
            up.push(ResBlock::new(&mut base.sub(&format!("up{i}")), cur + c, c, time_dim, g)?);
            cur = c;
        }
        let norm_out = GroupNorm::new(&mut base.sub("norm_out"), g, c0)?;
        let conv_out = Conv2d::new(&mut base.sub("conv_out"), c0, cfg.image_channels, 3, 1)?;
        drop(base);

        let mut cross = scope.with_partition("cross", Partition::CrossAttn);
        let down_cross = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| AttnBlock::new(&mut cross.sub(&format!("down{i}")), c, context_dim, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mid_cross = AttnBlock::new(&mut cross.sub("mid"), c_low, context_dim, cfg)?;
        let up_cross = widths
            .iter()
            .enumerate()
            .rev()
            .map(|(i, &c)| AttnBlock::new(&mut cross.sub(&format!("up{i}")), c, context_dim, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            time_dim,
            conv_in,
            time1,
            time2,
            down,
            down_cross,
            downsample,
            mid1,
            mid_self,
            mid_cross,
            mid2,
            up,
            up_cross,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Where control residues are added, for a condition volume at
    /// `1/volume_reduction` of the image resolution.
    pub fn injection_points(&self, volume_reduction: usize) -> Vec<InjectionPoint> {
        let widths = self.cfg.widths();
        let point = |channels: usize, level: usize| {
            let r = 1usize << level;
            InjectionPoint {
                channels,
                upsample: (volume_reduction / r).max(1),
                downsample: (r / volume_reduction).max(1),
            }
        };
        let mut pts: Vec<InjectionPoint> = widths.iter().enumerate().map(|(i, &c)| point(c, i)).collect();
        pts.push(point(*widths.last().expect("non-empty"), widths.len() - 1));
        pts
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let r = self.cfg.reduction();
        if h == 0 || w == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape(format!("denoiser input {h}x{w} is not divisible by {r}")));
        }
        Ok(())
    }

    /// Predicted `v` for `x_t` given the signed source image and timesteps.
    pub fn forward(&self, ps: &ParamStore, x_t: &Tensor, source: &Tensor, t: &[f64], guide: Guidance<'_>) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        if source.dims() != x_t.dims() || c != self.cfg.image_channels {
            return Err(Error::shape(format!(
                "denoiser expects matching {}-channel x_t and source, got {:?} and {:?}",
                self.cfg.image_channels,
                x_t.dims(),
                source.dims()
            )));
        }
        self.check_dims(h, w)?;
        if t.len() != b {
            return Err(Error::shape(format!("{} timesteps for a batch of {b}", t.len())));
        }
        let levels = self.down.len();
        if let Some(r) = guide.residues {
            if r.len() != levels + 1 {
                return Err(Error::shape(format!("expected {} control residues, got {}", levels + 1, r.len())));
            }
        }
        let dtype = x_t.dtype();
        let temb = timestep_embedding(t, self.cfg.base_channels * self.cfg.channel_mults[0], dtype, x_t.device())?;
        let temb = self.time2.forward(ps, &self.time1.forward(ps, &temb)?.silu()?)?.silu()?;
        debug_assert_eq!(temb.dim(1)?, self.time_dim);

        let add_residue = |h: Tensor, i: usize| -> Result<Tensor> {
            match guide.residues {
                Some(r) => Ok(h.broadcast_add(&r[i])?),
                None => Ok(h),
            }
        };
        let cross = |block: &AttnBlock, h: Tensor| -> Result<Tensor> {
            match guide.context {
                Some(ctx) => block.forward(ps, &h, Some(ctx)),
                None => Ok(h),
            }
        };

        let mut h = self.conv_in.forward(ps, &Tensor::cat(&[x_t, source], 1)?)?;
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = self.down[i].forward(ps, &h, &temb)?;
            h = cross(&self.down_cross[i], h)?;
            h = add_residue(h, i)?;
            skips.push(h.clone());
            if i + 1 < levels {
                h = self.downsample[i].forward(ps, &h)?;
            }
        }
        h = self.mid1.forward(ps, &h, &temb)?;
        h = self.mid_self.forward(ps, &h, None)?;
        h = cross(&self.mid_cross, h)?;
        h = self.mid2.forward(ps, &h, &temb)?;
        h = add_residue(h, levels)?;
        for (k, i) in (0..levels).rev().enumerate() {
            h = Tensor::cat(&[&h, &skips[i]], 1)?;
            h = self.up[k].forward(ps, &h, &temb)?;
            h = cross(&self.up_cross[k], h)?;
            if i > 0 {
                h = upsample_nearest(&h, 2)?;
            }
        }
        self.conv_out.forward(ps, &self.norm_out.forward(ps, &h)?.silu()?)
    }
}
