//! Variational encoder trained against a frozen generator.
//!
//! The encoder maps an image to a Gaussian posterior over `z`, a mapper lifts
//! the reparameterized sample to the generator's style space, and the frozen
//! generator renders it back. Relit variants come from shifting the style
//! vector along fixed lighting directions.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::nn::layers::{upsample_nearest, Conv2d, Linear};
use crate::nn::{AdamW, AdamWConfig, ParamStore, Partition};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// An image synthesizer whose parameters are never trained here.
pub trait FrozenGenerator {
    fn w_dim(&self) -> usize;
    /// Output image side length.
    fn size(&self) -> usize;
    /// `(B, w_dim)` style vectors to `(B, 3, H, W)` images in `[-1, 1]`.
    fn generate(&self, w: &Tensor) -> Result<Tensor>;
    /// Predefined lighting directions in style space.
    fn directions(&self) -> &[Vec<f32>];
    /// Hash of every generator parameter.
    fn fingerprint(&self) -> Result<String>;
}

/// A tiny random decoder standing in for a pretrained style-based generator.
pub struct ToyGenerator {
    store: ParamStore,
    fc: Linear,
    conv1: Conv2d,
    conv2: Conv2d,
    w_dim: usize,
    size: usize,
    width: usize,
    directions: Vec<Vec<f32>>,
}

impl ToyGenerator {
    /// `size` must be a multiple of 4; `n_directions` unit-norm directions
    /// are drawn at random.
    pub fn new(w_dim: usize, size: usize, n_directions: usize, seed: u64) -> Result<Self> {
        if size % 4 != 0 || size == 0 {
            return Err(Error::invalid(format!("toy generator size {size} is not a multiple of 4")));
        }
        let width = 32;
        let mut store = ParamStore::new(DType::F32, Device::Cpu, seed);
        let s = size / 4;
        let mut root = store.root(Partition::Generator);
        let fc = Linear::new(&mut root.sub("fc"), w_dim, width * s * s, true)?;
        let conv1 = Conv2d::new(&mut root.sub("conv1"), width, width, 3, 1)?;
        let conv2 = Conv2d::new(&mut root.sub("conv2"), width, 3, 3, 1)?;
        store.set_frozen([Partition::Generator]);
        let mut r = rng::stream(seed, 1);
        let directions = (0..n_directions)
            .map(|_| {
                let v = rng::normal_vec(&mut r, w_dim);
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                v.into_iter().map(|x| 2.0 * x / n).collect()
            })
            .collect();
        Ok(Self {
            store,
            fc,
            conv1,
            conv2,
            w_dim,
            size,
            width,
            directions,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

impl FrozenGenerator for ToyGenerator {
    fn w_dim(&self) -> usize {
        self.w_dim
    }

    fn size(&self) -> usize {
        self.size
    }

    fn generate(&self, w: &Tensor) -> Result<Tensor> {
        let b = w.dim(0)?;
        let s = self.size / 4;
        let h = self.fc.forward(&self.store, w)?.reshape((b, self.width, s, s))?.silu()?;
        let h = self.conv1.forward(&self.store, &upsample_nearest(&h, 2)?)?.silu()?;
        Ok(self.conv2.forward(&self.store, &upsample_nearest(&h, 2)?)?.tanh()?)
    }

    fn directions(&self) -> &[Vec<f32>] {
        &self.directions
    }

    fn fingerprint(&self) -> Result<String> {
        self.store.digest(&[Partition::Generator])
    }
}

/// `½ Σ (μ² + σ² − log σ² − 1)` per row, averaged over the batch.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let per = ((mu.sqr()? + logvar.exp()?)? - logvar)?
        .affine(1.0, -1.0)?
        .sum(D::Minus1)?
        .affine(0.5, 0.0)?;
    Ok(per.mean_all()?)
}

/// Pluggable image distance for the perceptual term.
pub trait PerceptualLoss {
    fn loss(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;
}

/// Mean squared difference of finite-difference gradient magnitudes at
/// several dyadic scales.
#[derive(Debug, Clone)]
pub struct GradientPerceptual {
    pub scales: Vec<usize>,
}

impl Default for GradientPerceptual {
    fn default() -> Self {
        Self { scales: vec![1, 2, 4] }
    }
}

fn grad_magnitude(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dx = (x.narrow(3, 1, w - 1)? - x.narrow(3, 0, w - 1)?)?.narrow(2, 0, h - 1)?;
    let dy = (x.narrow(2, 1, h - 1)? - x.narrow(2, 0, h - 1)?)?.narrow(3, 0, w - 1)?;
    Ok(((dx.sqr()? + dy.sqr()?)? + 1e-6)?.sqrt()?)
}

impl PerceptualLoss for GradientPerceptual {
    fn loss(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for &s in &self.scales {
            let (pa, pb) = (crate::nn::layers::avg_pool(a, s)?, crate::nn::layers::avg_pool(b, s)?);
            if pa.dim(2)? < 2 || pa.dim(3)? < 2 {
                continue;
            }
            let term = crate::nn::layers::mse(&grad_magnitude(&pa)?, &grad_magnitude(&pb)?)?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::shape("images too small for every perceptual scale"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub z_dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_perceptual: f64,
    pub lambda_kl: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            z_dim: 16,
            steps: 500,
            batch: 16,
            lr: 2e-3,
            lambda_perceptual: 0.1,
            lambda_kl: 1e-3,
            seed: 0,
        }
    }
}

pub struct VariationalEncoder {
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
    map1: Linear,
    map2: Linear,
    z_dim: usize,
    size: usize,
}

#[derive(Debug, Clone)]
pub struct Posterior {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl VariationalEncoder {
    pub fn new(size: usize, z_dim: usize, w_dim: usize, seed: u64) -> Result<Self> {
        if size % 4 != 0 || size == 0 {
            return Err(Error::invalid(format!("encoder input size {size} is not a multiple of 4")));
        }
        let mut store = ParamStore::new(DType::F32, Device::Cpu, seed);
        let mut root = store.root(Partition::Encoder);
        let conv1 = Conv2d::new(&mut root.sub("conv1"), 3, 16, 3, 2)?;
        let conv2 = Conv2d::new(&mut root.sub("conv2"), 16, 32, 3, 2)?;
        let flat = 32 * (size / 4) * (size / 4);
        let head = Linear::new(&mut root.sub("head"), flat, 2 * z_dim, true)?;
        let map1 = Linear::new(&mut root.sub("map1"), z_dim, 64, true)?;
        let map2 = Linear::new(&mut root.sub("map2"), 64, w_dim, true)?;
        Ok(Self {
            store,
            conv1,
            conv2,
            head,
            map1,
            map2,
            z_dim,
            size,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    /// `x`: `(B, 3, H, W)` in `[-1, 1]`.
    pub fn posterior(&self, x: &Tensor) -> Result<Posterior> {
        let (b, _, h, w) = x.dims4()?;
        if h != self.size || w != self.size {
            return Err(Error::shape(format!("encoder expects {0}x{0}, got {h}x{w}", self.size)));
        }
        let f = self.conv1.forward(&self.store, x)?.silu()?;
        let f = self.conv2.forward(&self.store, &f)?.silu()?.reshape((b, ()))?;
        let stats = self.head.forward(&self.store, &f)?;
        Ok(Posterior {
            mu: stats.narrow(1, 0, self.z_dim)?,
            logvar: stats.narrow(1, self.z_dim, self.z_dim)?.clamp(-10.0, 10.0)?,
        })
    }

    /// Reparameterized draw `z = μ + exp(½ log σ²)·ε`.
    pub fn sample(&self, post: &Posterior, rng: &mut Rng) -> Result<Tensor> {
        let eps = rng::normal_tensor(rng, post.mu.dims(), post.mu.dtype(), post.mu.device())?;
        Ok((&post.mu + (post.logvar.affine(0.5, 0.0)?.exp()? * eps)?)?)
    }

    pub fn map(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.map1.forward(&self.store, z)?.silu()?;
        self.map2.forward(&self.store, &h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeStep {
    pub step: usize,
    pub loss: f64,
    pub recon_mse: f64,
    pub kl: f64,
}

/// Minimizes `MSE(x, x̂) + λ_p·P(x, x̂) + λ_kl·KL(q(z|x) ‖ N(0, I))` over the
/// encoder and mapper.
///
/// Panics if the generator's fingerprint changes during training.
pub fn train_variational_encoder(
    gen: &dyn FrozenGenerator,
    images: &[ImageTensor],
    perceptual: &dyn PerceptualLoss,
    cfg: &VaeConfig,
) -> Result<(VariationalEncoder, Vec<VaeStep>)> {
    if images.is_empty() {
        return Err(Error::data("no images to train on"));
    }
    let before = gen.fingerprint()?;
    let enc = VariationalEncoder::new(gen.size(), cfg.z_dim, gen.w_dim(), cfg.seed)?;
    let mut opt = AdamW::new(
        enc.store.vars_in(&[Partition::Encoder]),
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let all = ImageTensor::batch_to_signed_tensor(images, DType::F32, &Device::Cpu)?;
    let mut r = rng::stream(cfg.seed, 2);
    let mut log = Vec::with_capacity(cfg.steps);
    use rand::Rng as _;
    for step in 0..cfg.steps {
        let idx: Vec<u32> = (0..cfg.batch.min(images.len()).max(1))
            .map(|_| r.random_range(0..images.len()) as u32)
            .collect();
        let x = all.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?;
        let post = enc.posterior(&x)?;
        let z = enc.sample(&post, &mut r)?;
        let xh = gen.generate(&enc.map(&z)?)?;
        let recon = crate::nn::layers::mse(&xh, &x)?;
        let kl = kl_divergence(&post.mu, &post.logvar)?;
        let loss = ((&recon + (perceptual.loss(&xh, &x)? * cfg.lambda_perceptual)?)? + (&kl * cfg.lambda_kl)?)?;
        opt.step(&loss.backward()?)?;
        log.push(VaeStep {
            step,
            loss: loss.to_scalar::<f32>()? as f64,
            recon_mse: recon.to_scalar::<f32>()? as f64,
            kl: kl.to_scalar::<f32>()? as f64,
        });
    }
    assert_eq!(before, gen.fingerprint()?, "generator parameters changed during encoder training");
    Ok((enc, log))
}

/// Encodes `img` once, then renders `gen(w⁺ + d_k)` for every direction.
pub fn generate_relit_variants(
    enc: &VariationalEncoder,
    gen: &dyn FrozenGenerator,
    img: &ImageTensor,
    directions: &[Vec<f32>],
    rng: &mut Rng,
) -> Result<Vec<ImageTensor>> {
    if directions.is_empty() {
        return Err(Error::invalid("need at least one lighting direction"));
    }
    let x = img.to_signed_tensor(DType::F32, &Device::Cpu)?;
    let post = enc.posterior(&x)?;
    let w = enc.map(&enc.sample(&post, rng)?)?;
    directions
        .iter()
        .map(|d| {
            if d.len() != gen.w_dim() {
                return Err(Error::shape(format!("direction has {} dims, expected {}", d.len(), gen.w_dim())));
            }
            let shifted = w.broadcast_add(&Tensor::from_slice(d, (1, d.len()), &Device::Cpu)?)?;
            ImageTensor::from_signed_tensor(&gen.generate(&shifted)?)
        })
        .collect()
}

/// Images rendered by the generator at random style vectors.
pub fn sample_generator_images(gen: &dyn FrozenGenerator, n: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    let mut r = rng::stream(seed, 3);
    let w = rng::normal_tensor(&mut r, (n, gen.w_dim()), DType::F32, &Device::Cpu)?;
    ImageTensor::batch_from_signed_tensor(&gen.generate(&w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form_cases() {
        let d = &Device::Cpu;
        let zero = Tensor::zeros((3, 5), DType::F64, d).unwrap();
        assert_eq!(kl_divergence(&zero, &zero).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let one = Tensor::ones((3, 5), DType::F64, d).unwrap();
        assert_eq!(kl_divergence(&one, &zero).unwrap().to_scalar::<f64>().unwrap(), 2.5);
    }

    #[test]
    fn zero_direction_reproduces_the_reconstruction() {
        let gen = ToyGenerator::new(8, 16, 2, 1).unwrap();
        let enc = VariationalEncoder::new(16, 4, 8, 2).unwrap();
        let img = sample_generator_images(&gen, 1, 3).unwrap().remove(0);
        let zero = vec![0f32; 8];
        let out = generate_relit_variants(&enc, &gen, &img, &[zero.clone(), zero], &mut rng::seeded(0)).unwrap();
        let mut r = rng::seeded(0);
        let x = img.to_signed_tensor(DType::F32, &Device::Cpu).unwrap();
        let w = enc.map(&enc.sample(&enc.posterior(&x).unwrap(), &mut r).unwrap()).unwrap();
        let recon = ImageTensor::from_signed_tensor(&gen.generate(&w).unwrap()).unwrap();
        assert_eq!(out[0], recon);
        assert_eq!(out[1], recon);
    }
}
