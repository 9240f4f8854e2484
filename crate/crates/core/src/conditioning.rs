//! Conditioning signals derived from a latent intrinsic pair.
//!
//! * The control volume: the lighting code is broadcast over the intrinsic
//!   grid, concatenated with the intrinsic map and convolved down to half
//!   resolution. Zero-initialized 1×1 projections turn it into residues that
//!   are added to the denoiser's encoder activations.
//! * The lighting embedding: the code is tiled to the adaptor input width and
//!   mapped by a four-layer MLP to `n_tok` cross-attention tokens.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::intrinsics::{IntrinsicMap, LightCode};
use crate::nn::layers::{avg_pool, upsample_nearest, Conv2d, Linear};
use crate::nn::{ParamStore, Partition, Scope};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningConfig {
    pub c_int: usize,
    pub d_light: usize,
    pub c_ctrl: usize,
    pub n_tok: usize,
    pub d_emb: usize,
    pub adaptor_widths: [usize; 5],
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            c_int: 32,
            d_light: 8,
            c_ctrl: 128,
            n_tok: 3,
            d_emb: 128,
            adaptor_widths: [384, 512, 512, 512, 384],
        }
    }
}

impl ConditioningConfig {
    /// The published dimensions: 144 concatenated channels, a 512-channel
    /// volume and three 1024-wide tokens from a 3072→4096³→3072 adaptor.
    pub fn full_scale() -> Self {
        Self {
            c_int: 128,
            d_light: 16,
            c_ctrl: 512,
            n_tok: 3,
            d_emb: 1024,
            adaptor_widths: [3072, 4096, 4096, 4096, 3072],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [input, .., output] = self.adaptor_widths;
        if self.d_light == 0 || input % self.d_light != 0 {
            return Err(Error::invalid(format!(
                "adaptor input width {input} is not a multiple of d_light {}",
                self.d_light
            )));
        }
        if output != self.n_tok * self.d_emb {
            return Err(Error::invalid(format!(
                "adaptor output width {output} != n_tok·d_emb = {}",
                self.n_tok * self.d_emb
            )));
        }
        if self.adaptor_widths.contains(&0) || self.c_ctrl == 0 || self.c_int == 0 {
            return Err(Error::invalid("conditioning widths must be positive"));
        }
        Ok(())
    }
}

/// `(B, C_int, Hf, Wf)` ⊕ code broadcast to `(B, d_light, Hf, Wf)`.
pub fn expand_and_concat_tensor(intrinsic: &Tensor, code: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = intrinsic.dims4()?;
    let (cb, d) = code.dims2()?;
    if cb != b {
        return Err(Error::shape(format!("batch mismatch: intrinsic {b}, code {cb}")));
    }
    let planes = code
        .to_dtype(intrinsic.dtype())?
        .reshape((b, d, 1, 1))?
        .broadcast_as((b, d, h, w))?;
    Ok(Tensor::cat(&[intrinsic, &planes.contiguous()?], 1)?)
}

/// The `(1, C_int + d_light, Hf, Wf)` concatenation of one intrinsic pair.
pub fn expand_and_concat(intrinsic: &IntrinsicMap, code: &LightCode) -> Result<Tensor> {
    let t = intrinsic.tensor();
    expand_and_concat_tensor(t, &code.to_tensor(t.dtype(), t.device())?)
}

/// Repeats the code `width / d_light` times: `out[k] = code[k mod d_light]`.
pub fn rescale_code(code: &[f32], width: usize) -> Result<Vec<f32>> {
    if code.is_empty() || width % code.len() != 0 {
        return Err(Error::invalid(format!(
            "adaptor width {width} is not a multiple of the code dimension {}",
            code.len()
        )));
    }
    Ok(code.iter().copied().cycle().take(width).collect())
}

/// Tensor form of [`rescale_code`] over a `(B, d_light)` batch.
pub fn rescale_code_tensor(code: &Tensor, width: usize) -> Result<Tensor> {
    let (b, d) = code.dims2()?;
    if d == 0 || width % d != 0 {
        return Err(Error::invalid(format!(
            "adaptor width {width} is not a multiple of the code dimension {d}"
        )));
    }
    Ok(code
        .reshape((b, 1, d))?
        .broadcast_as((b, width / d, d))?
        .reshape((b, width))?)
}

/// Where, and at what width, the denoiser accepts a control residue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectionPoint {
    pub channels: usize,
    /// Injection resolution divided by the volume resolution; `< 1` entries
    /// are expressed with `downsample`.
    pub upsample: usize,
    pub downsample: usize,
}

pub struct ControlBranch {
    convs: [Conv2d; 3],
    zero_proj: Vec<Conv2d>,
    points: Vec<InjectionPoint>,
    c_in: usize,
}

impl ControlBranch {
    /// Parameters go under `scope` in the control partition.
    pub fn new(scope: &mut Scope<'_>, cfg: &ConditioningConfig, points: &[InjectionPoint]) -> Result<Self> {
        let mut s = scope.with_partition("control", Partition::Control);
        let c_in = cfg.c_int + cfg.d_light;
        let convs = [
            Conv2d::new(&mut s.sub("conv0"), c_in, cfg.c_ctrl, 3, 1)?,
            Conv2d::new(&mut s.sub("conv1"), cfg.c_ctrl, cfg.c_ctrl, 3, 2)?,
            Conv2d::new(&mut s.sub("conv2"), cfg.c_ctrl, cfg.c_ctrl, 3, 1)?,
        ];
        let zero_proj = points
            .iter()
            .enumerate()
            .map(|(i, p)| Conv2d::zeros(&mut s.sub(&format!("zero{i}")), cfg.c_ctrl, p.channels, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            zero_proj,
            points: points.to_vec(),
            c_in,
        })
    }

    /// The condition volume `(B, C_ctrl, Hf/2, Wf/2)`.
    pub fn volume(&self, ps: &ParamStore, concat: &Tensor) -> Result<Tensor> {
        let c = concat.dim(1)?;
        if c != self.c_in {
            return Err(Error::shape(format!("control branch expects {} channels, got {c}", self.c_in)));
        }
        let (_, _, h, w) = concat.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("intrinsic grid {h}x{w} must have even dims")));
        }
        let mut f = concat.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            f = conv.forward(ps, &f)?;
            if i < 2 {
                f = f.silu()?;
            }
        }
        Ok(f)
    }

    /// One residue per injection point, resampled to its resolution.
    pub fn residues(&self, ps: &ParamStore, volume: &Tensor) -> Result<Vec<Tensor>> {
        self.points
            .iter()
            .zip(&self.zero_proj)
            .map(|(p, proj)| {
                let v = avg_pool(&upsample_nearest(volume, p.upsample)?, p.downsample)?;
                proj.forward(ps, &v)
            })
            .collect()
    }

    pub fn forward(&self, ps: &ParamStore, concat: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let v = self.volume(ps, concat)?;
        let r = self.residues(ps, &v)?;
        Ok((v, r))
    }
}

pub struct AdaptorMLP {
    layers: [Linear; 4],
    n_tok: usize,
    d_emb: usize,
}

impl AdaptorMLP {
    pub fn new(scope: &mut Scope<'_>, cfg: &ConditioningConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = scope.with_partition("adaptor", Partition::Adaptor);
        let w = cfg.adaptor_widths;
        let layers = [0, 1, 2, 3].map(|i| Linear::new(&mut s.sub(&format!("fc{i}")), w[i], w[i + 1], true));
        let [a, b, c, d] = layers;
        Ok(Self {
            layers: [a?, b?, c?, d?],
            n_tok: cfg.n_tok,
            d_emb: cfg.d_emb,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// `(B, d_light)` codes to `(B, n_tok, d_emb)` tokens; SiLU between
    /// layers, none after the last.
    pub fn forward(&self, ps: &ParamStore, code: &Tensor) -> Result<Tensor> {
        let mut h = rescale_code_tensor(code, self.input_width())?;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(ps, &h)?;
            if i < 3 {
                h = h.silu()?;
            }
        }
        let b = h.dim(0)?;
        Ok(h.reshape((b, self.n_tok, self.d_emb))?)
    }
}

/// `n_tok × d_emb` cross-attention tokens, held as `(1, n_tok, d_emb)`.
#[derive(Debug, Clone)]
pub struct LightEmbedding {
    tokens: Tensor,
}

impl LightEmbedding {
    pub fn from_tensor(tokens: Tensor) -> Result<Self> {
        let (b, _, _) = tokens.dims3()?;
        if b != 1 {
            return Err(Error::shape(format!("light embedding needs batch 1, got {b}")));
        }
        Ok(Self { tokens })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    /// `(n_tok, d_emb)`.
    pub fn dims(&self) -> (usize, usize) {
        let d = self.tokens.dims();
        (d[1], d[2])
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.tokens.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?)
    }
}

impl AdaptorMLP {
    pub fn adapt(&self, ps: &ParamStore, code: &LightCode) -> Result<LightEmbedding> {
        let c = code.to_tensor(ps.dtype(), ps.device())?;
        LightEmbedding::from_tensor(self.forward(ps, &c)?)
    }
}

/// Name of the adaptor nonlinearity, recorded in checkpoint headers.
pub const ADAPTOR_ACTIVATION: &str = "silu";

/// Mean over tokens of the squared norm; a cheap scalar summary.
pub fn embedding_energy(tokens: &Tensor) -> Result<f64> {
    Ok(tokens
        .sqr()?
        .sum(D::Minus1)?
        .mean_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?)
}
