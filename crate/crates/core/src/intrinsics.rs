//! Latent intrinsic / extrinsic factorization.
//!
//! The encoder maps an image to a spatial intrinsic map at 1/8 resolution,
//! rescaled to unit RMS over channels at every pixel, and a global lighting
//! code; the decoder renders an intrinsic map under any
//! lighting code. Training uses same-scene pairs `(x_a, x_b)` and the loss
//!
//! ```text
//! MSE(dec(A_a, c_b), x_b) + MSE(dec(A_b, c_a), x_a) + MSE(dec(A_a, c_a), x_a)
//! ```
//!
//! which only a model that moves lighting into the code can minimize.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::image::ImageTensor;
use crate::nn::layers::{mse, upsample_nearest, Conv2d, Linear};
use crate::nn::{AdamW, AdamWConfig, Init, ParamStore, Partition};
use crate::rng;
use crate::train::{LossRow, LrSchedule, PairedImages};
use crate::{Error, Result};

pub const DOWNSAMPLE: usize = 8;
pub const CHECKPOINT_KIND: &str = "intrinsics";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsConfig {
    pub c_int: usize,
    pub d_light: usize,
    /// Encoder widths after each stride-2 stage; the decoder mirrors them.
    pub widths: [usize; 3],
    pub seed: u64,
}

impl Default for IntrinsicsConfig {
    fn default() -> Self {
        Self {
            c_int: 32,
            d_light: 8,
            widths: [16, 32, 64],
            seed: 0,
        }
    }
}

impl IntrinsicsConfig {
    /// The published dimensions: 128 intrinsic channels, 16-d codes.
    pub fn full_scale() -> Self {
        Self {
            c_int: 128,
            d_light: 16,
            ..Self::default()
        }
    }
}

/// `Hf × Wf × C_int` features, held as a `(1, C_int, Hf, Wf)` tensor.
#[derive(Debug, Clone)]
pub struct IntrinsicMap {
    tensor: Tensor,
}

impl IntrinsicMap {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (b, ..) = tensor.dims4()?;
        if b != 1 {
            return Err(Error::shape(format!("intrinsic map needs batch 1, got {b}")));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// `(Hf, Wf, C_int)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.tensor.dims4().expect("validated at construction");
        (h, w, c)
    }

    /// Interleaved `Hf·Wf·C_int` values.
    pub fn to_hwc(&self) -> Result<Vec<f32>> {
        Ok(self
            .tensor
            .squeeze(0)?
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightCode {
    pub values: Vec<f32>,
}

impl LightCode {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, self.values.len()), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor_row(t: &Tensor, row: usize) -> Result<Self> {
        Ok(Self::new(t.get(row)?.to_dtype(DType::F32)?.to_vec1()?))
    }

    pub fn l2_distance(&self, other: &LightCode) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

struct FiLM {
    proj: Linear,
    channels: usize,
}

impl FiLM {
    fn forward(&self, ps: &ParamStore, h: &Tensor, code: &Tensor) -> Result<Tensor> {
        let b = code.dim(0)?;
        let p = self.proj.forward(ps, code)?;
        let scale = (p.narrow(1, 0, self.channels)? + 1.0)?.reshape((b, self.channels, 1, 1))?;
        let shift = p.narrow(1, self.channels, self.channels)?.reshape((b, self.channels, 1, 1))?;
        Ok(h.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

pub struct IntrinsicsModel {
    cfg: IntrinsicsConfig,
    store: ParamStore,
    enc: [Conv2d; 4],
    spatial_head: Conv2d,
    code_head: Linear,
    dec: [Conv2d; 4],
    film: [FiLM; 4],
    out: Conv2d,
}

impl IntrinsicsModel {
    pub fn new(cfg: IntrinsicsConfig, dtype: DType) -> Result<Self> {
        let [w1, w2, w3] = cfg.widths;
        if cfg.c_int == 0 || cfg.d_light == 0 || w1 == 0 || w2 == 0 || w3 == 0 {
            return Err(Error::invalid("intrinsics dims must be positive"));
        }
        let mut store = ParamStore::new(dtype, Device::Cpu, cfg.seed);
        let mut root = store.root(Partition::Intrinsics);
        let mut e = root.sub("enc");
        // Two extra input channels carry normalized pixel coordinates.
        let enc = [
            Conv2d::new(&mut e.sub("0"), 5, w1, 3, 2)?,
            Conv2d::new(&mut e.sub("1"), w1, w2, 3, 2)?,
            Conv2d::new(&mut e.sub("2"), w2, w3, 3, 2)?,
            Conv2d::new(&mut e.sub("3"), w3, w3, 3, 1)?,
        ];
        let spatial_head = Conv2d::new(&mut e.sub("spatial"), w3, cfg.c_int, 1, 1)?;
        let code_head = Linear::new(&mut e.sub("code"), w3, cfg.d_light, true)?;
        let mut d = root.sub("dec");
        let dec = [
            Conv2d::new(&mut d.sub("0"), cfg.c_int, w3, 3, 1)?,
            Conv2d::new(&mut d.sub("1"), w3, w2, 3, 1)?,
            Conv2d::new(&mut d.sub("2"), w2, w1, 3, 1)?,
            Conv2d::new(&mut d.sub("3"), w1, w1, 3, 1)?,
        ];
        let film_w = [w3, w2, w1, w1];
        let film = [0, 1, 2, 3].map(|i| FiLM {
            proj: Linear::with_init(
                &mut d.sub(&format!("film{i}")),
                cfg.d_light,
                2 * film_w[i],
                true,
                Init::Kaiming {
                    fan_in: cfg.d_light,
                    gain: 0.5,
                },
            )
            .expect("fresh store"),
            channels: film_w[i],
        });
        let out = Conv2d::new(&mut d.sub("out"), w1, 3, 3, 1)?;
        Ok(Self {
            cfg,
            store,
            enc,
            spatial_head,
            code_head,
            dec,
            film,
            out,
        })
    }

    pub fn config(&self) -> &IntrinsicsConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} is not divisible by the encoder downsample factor {DOWNSAMPLE}"
            )));
        }
        Ok(())
    }

    /// `x`: `(B, 3, H, W)` in `[-1, 1]` to `((B, C_int, H/8, W/8), (B, d_light))`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("encoder expects 3 channels, got {c}")));
        }
        self.check_dims(h, w)?;
        let ps = &self.store;
        let coords = coord_channels(b, h, w, x.dtype(), x.device())?;
        let mut f = Tensor::cat(&[x, &coords], 1)?;
        for conv in &self.enc {
            f = conv.forward(ps, &f)?.silu()?;
        }
        let intrinsic = unit_rms(&self.spatial_head.forward(ps, &f)?)?;
        let pooled = f.mean(3)?.mean(2)?;
        let code = self.code_head.forward(ps, &pooled)?;
        Ok((intrinsic, code))
    }

    /// Signed-range image `(B, 3, 8·Hf, 8·Wf)`, unclamped.
    pub fn decode_tensor(&self, intrinsic: &Tensor, code: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = intrinsic.dims4()?;
        if c != self.cfg.c_int {
            return Err(Error::shape(format!("decoder expects {} intrinsic channels, got {c}", self.cfg.c_int)));
        }
        if code.dims() != [b, self.cfg.d_light] {
            return Err(Error::shape(format!(
                "decoder expects codes of shape [{b}, {}], got {:?}",
                self.cfg.d_light,
                code.dims()
            )));
        }
        let ps = &self.store;
        let mut h = intrinsic.clone();
        for (i, (conv, film)) in self.dec.iter().zip(&self.film).enumerate() {
            if i > 0 && i < 4 {
                h = upsample_nearest(&h, 2)?;
            }
            h = film.forward(ps, &conv.forward(ps, &h)?, code)?.silu()?;
        }
        self.out.forward(ps, &h)
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<(IntrinsicMap, LightCode)> {
        if img.channels() != 3 {
            return Err(Error::shape(format!("expected an RGB image, got {} channels", img.channels())));
        }
        self.check_dims(img.height(), img.width())?;
        let x = img.to_signed_tensor(self.dtype(), &Device::Cpu)?;
        let (a, c) = self.encode_tensor(&x)?;
        Ok((IntrinsicMap::from_tensor(a)?, LightCode::from_tensor_row(&c, 0)?))
    }

    pub fn relight_decode(&self, intrinsic: &IntrinsicMap, code: &LightCode) -> Result<ImageTensor> {
        if code.dim() != self.cfg.d_light {
            return Err(Error::shape(format!(
                "light code has {} dims, model uses {}",
                code.dim(),
                self.cfg.d_light
            )));
        }
        let c = code.to_tensor(self.dtype(), &Device::Cpu)?;
        let y = self.decode_tensor(&intrinsic.tensor.to_dtype(self.dtype())?, &c)?;
        ImageTensor::from_signed_tensor(&y)
    }

    /// The three-term swap objective on a batch of same-scene pairs.
    pub fn swap_loss(&self, xa: &Tensor, xb: &Tensor) -> Result<Tensor> {
        let b = xa.dim(0)?;
        let (a, c) = self.encode_tensor(&Tensor::cat(&[xa, xb], 0)?)?;
        let (aa, ab) = (a.narrow(0, 0, b)?, a.narrow(0, b, b)?);
        let (ca, cb) = (c.narrow(0, 0, b)?, c.narrow(0, b, b)?);
        let dec = self.decode_tensor(&Tensor::cat(&[&aa, &ab, &aa], 0)?, &Tensor::cat(&[&cb, &ca, &ca], 0)?)?;
        let target = Tensor::cat(&[xb, xa, xa], 0)?;
        // Mean over the stacked batch equals the mean of the three terms'
        // per-term means; scale by 3 to recover their sum.
        Ok((mse(&dec, &target)? * 3.0)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "version": CHECKPOINT_VERSION,
                "c_int": self.cfg.c_int,
                "d_light": self.cfg.d_light,
                "downsample_factor": DOWNSAMPLE,
                "config": self.cfg,
            }),
            self.store.to_records()?,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let version: u32 = ckpt.meta_field("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::checkpoint(format!(
                "intrinsics checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let cfg: IntrinsicsConfig = ckpt.meta_field("config")?;
        let factor: usize = ckpt.meta_field("downsample_factor")?;
        if factor != DOWNSAMPLE || ckpt.meta_field::<usize>("c_int")? != cfg.c_int
            || ckpt.meta_field::<usize>("d_light")? != cfg.d_light
        {
            return Err(Error::checkpoint("intrinsics checkpoint header is inconsistent"));
        }
        let mut model = Self::new(cfg, dtype)?;
        let names = model.store.names();
        let params: Vec<_> = ckpt.tensors.iter().filter(|t| t.partition.is_some()).collect();
        if params.len() != names.len() || params.iter().any(|t| !names.contains(&t.name)) {
            return Err(Error::checkpoint("intrinsics checkpoint tensors do not match the architecture"));
        }
        model.store.load_records(params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, DType::F32)
    }
}

/// Rescales every pixel's feature vector to unit RMS over channels.
fn unit_rms(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)? as f64;
    let norm = ((x.sqr()?.sum_keepdim(1)? / c)? + 1e-6)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn coord_channels(b: usize, h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = Vec::with_capacity(2 * h * w);
    for y in 0..h {
        for _ in 0..w {
            v.push(2.0 * (y as f32 + 0.5) / h as f32 - 1.0);
        }
    }
    for _ in 0..h {
        for x in 0..w {
            v.push(2.0 * (x as f32 + 0.5) / w as f32 - 1.0);
        }
    }
    Ok(Tensor::from_vec(v, (1, 2, h, w), device)?
        .to_dtype(dtype)?
        .broadcast_as((b, 2, h, w))?
        .contiguous()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsTrainConfig {
    pub steps: usize,
    /// Same-scene pairs per step.
    pub batch: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for IntrinsicsTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 2e-3,
            schedule: LrSchedule::Cosine {
                warmup: 50,
                final_fraction: 0.05,
            },
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

pub struct IntrinsicsTrainer {
    pub model: IntrinsicsModel,
    opt: AdamW,
    cfg: IntrinsicsTrainConfig,
    rng: rng::Rng,
    step: usize,
}

impl IntrinsicsTrainer {
    pub fn new(model: IntrinsicsModel, cfg: IntrinsicsTrainConfig) -> Result<Self> {
        let opt = AdamW::new(
            model.store.vars_in(&[Partition::Intrinsics]),
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        let rng = rng::stream(cfg.seed, 11);
        Ok(Self {
            model,
            opt,
            cfg,
            rng,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn optimizer_mut(&mut self) -> &mut AdamW {
        &mut self.opt
    }

    /// Restores the step counter and shuffling stream of a resumed run.
    pub fn resume_at(&mut self, step: usize) {
        self.step = step;
        self.rng = rng::stream(self.cfg.seed ^ step as u64, 11);
    }

    pub fn train_step(&mut self, data: &PairedImages) -> Result<LossRow> {
        let mut xa = Vec::with_capacity(self.cfg.batch);
        let mut xb = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch.max(1) {
            let (a, b) = data.sample_pair(&mut self.rng)?;
            xa.push(a.clone());
            xb.push(b.clone());
        }
        let dt = self.model.dtype();
        let ta = ImageTensor::batch_to_signed_tensor(&xa, dt, &Device::Cpu)?;
        let tb = ImageTensor::batch_to_signed_tensor(&xb, dt, &Device::Cpu)?;
        let lr = self.cfg.schedule.lr_at(self.cfg.lr, self.step, self.cfg.steps);
        self.opt.set_lr(lr);
        let loss = self.model.swap_loss(&ta, &tb)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::data(format!("intrinsics loss diverged at step {}", self.step + 1)));
        }
        self.opt.step(&loss.backward()?)?;
        self.step += 1;
        Ok(LossRow {
            step: self.step as u64,
            loss: value,
            lr,
        })
    }
}

/// Trains a fresh model on every same-scene pair of `data`.
pub fn train_intrinsics(
    data: &PairedImages,
    model_cfg: IntrinsicsConfig,
    cfg: IntrinsicsTrainConfig,
) -> Result<(IntrinsicsModel, Vec<LossRow>)> {
    data.ensure_paired()?;
    let (h, w, _) = data.image_dims();
    let model = IntrinsicsModel::new(model_cfg, DType::F32)?;
    model.check_dims(h, w)?;
    let mut trainer = IntrinsicsTrainer::new(model, cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for _ in 0..cfg.steps {
        let row = trainer.train_step(data)?;
        if row.step % 200 == 0 {
            log::info!("intrinsics step {} loss {:.5} ({:.0?})", row.step, row.loss, start.elapsed());
        }
        log.push(row);
    }
    Ok((trainer.model, log))
}
