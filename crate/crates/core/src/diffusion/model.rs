use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::conditioning::{
    expand_and_concat_tensor, AdaptorMLP, ConditioningConfig, ControlBranch, LightEmbedding, ADAPTOR_ACTIVATION,
};
use crate::diffusion::schedule::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::diffusion::unet::{Denoiser, DenoiserConfig, Guidance};
use crate::image::ImageTensor;
use crate::intrinsics::{IntrinsicMap, IntrinsicsModel, LightCode, DOWNSAMPLE};
use crate::nn::layers::mse;
use crate::nn::{AdamW, AdamWConfig, ParamStore, Partition};
use crate::rng::{self, Rng};
use crate::selection::PostEnhancer;
use crate::train::{LossRow, LrSchedule, PairedImages};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "luminet";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;
/// The condition volume sits at half the intrinsic grid.
pub const VOLUME_REDUCTION: usize = 2 * DOWNSAMPLE;
const NOISE_STREAM: u64 = 0x6e6f697365;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LuminetConfig {
    /// Working resolution (square) of the pixel-space denoiser.
    pub resolution: usize,
    pub denoiser: DenoiserConfig,
    pub conditioning: ConditioningConfig,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub seed: u64,
}

impl Default for LuminetConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            denoiser: DenoiserConfig::default(),
            conditioning: ConditioningConfig::default(),
            schedule: ScheduleKind::Cosine,
            timesteps: 1000,
            seed: 0,
        }
    }
}

impl LuminetConfig {
    pub fn validate(&self) -> Result<()> {
        self.conditioning.validate()?;
        let r = self.resolution;
        let need = VOLUME_REDUCTION.max(self.denoiser.reduction());
        if r == 0 || r % need != 0 {
            return Err(Error::invalid(format!("resolution {r} must be a positive multiple of {need}")));
        }
        if self.timesteps == 0 {
            return Err(Error::invalid("timesteps must be positive"));
        }
        Ok(())
    }
}

/// Control residues and cross-attention context for one batch.
pub struct Conditions {
    pub residues: Vec<Tensor>,
    pub context: Tensor,
}

impl Conditions {
    pub fn guidance(&self) -> Guidance<'_> {
        Guidance {
            residues: Some(&self.residues),
            context: Some(&self.context),
        }
    }
}

pub struct LuminetModel {
    cfg: LuminetConfig,
    store: ParamStore,
    denoiser: Denoiser,
    control: ControlBranch,
    adaptor: AdaptorMLP,
    schedule: NoiseSchedule,
}

impl LuminetModel {
    pub fn new(cfg: LuminetConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, Device::Cpu, cfg.seed);
        let mut root = store.root(Partition::Base);
        let denoiser = Denoiser::new(&mut root, &cfg.denoiser, cfg.conditioning.d_emb)?;
        let points = denoiser.injection_points(VOLUME_REDUCTION);
        let control = ControlBranch::new(&mut root, &cfg.conditioning, &points)?;
        let adaptor = AdaptorMLP::new(&mut root, &cfg.conditioning)?;
        let schedule = make_schedule(cfg.timesteps, cfg.schedule)?;
        Ok(Self {
            cfg,
            store,
            denoiser,
            control,
            adaptor,
            schedule,
        })
    }

    pub fn config(&self) -> &LuminetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn control(&self) -> &ControlBranch {
        &self.control
    }

    pub fn adaptor(&self) -> &AdaptorMLP {
        &self.adaptor
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let r = self.cfg.resolution;
        if h != r || w != r {
            return Err(Error::shape(format!("model works at {r}x{r}, got a {h}x{w} image")));
        }
        Ok(())
    }

    /// Residues from `A_o ⊕ expand(c_t)` and tokens from `adapt(c_t)`.
    pub fn conditions(&self, intrinsic: &Tensor, code: &Tensor) -> Result<Conditions> {
        let dt = self.dtype();
        let (intrinsic, code) = (intrinsic.to_dtype(dt)?, code.to_dtype(dt)?);
        let concat = expand_and_concat_tensor(&intrinsic, &code)?;
        let (_, residues) = self.control.forward(&self.store, &concat)?;
        let context = self.adaptor.forward(&self.store, &code)?;
        Ok(Conditions { residues, context })
    }

    pub fn embedding(&self, code: &LightCode) -> Result<LightEmbedding> {
        self.adaptor.adapt(&self.store, code)
    }

    pub fn predict_v(&self, x_t: &Tensor, source: &Tensor, t: &[usize], guide: Guidance<'_>) -> Result<Tensor> {
        let tf: Vec<f64> = t.iter().map(|&t| t as f64).collect();
        self.denoiser.forward(&self.store, x_t, source, &tf, guide)
    }

    /// `‖v − θ(x_t, t, source, A_o, I_E)‖²` for fixed timesteps and noise.
    /// Without conditions the base denoiser is scored alone.
    pub fn loss(&self, batch: &PairBatch, t: &[usize], eps: &Tensor, conditioned: bool) -> Result<Tensor> {
        let x_t = self.schedule.q_sample(&batch.target, t, eps)?;
        let v = self.schedule.vpred(&batch.target, eps, t)?;
        let cond = if conditioned {
            Some(self.conditions(&batch.intrinsic, &batch.code)?)
        } else {
            None
        };
        let guide = cond.as_ref().map(Conditions::guidance).unwrap_or_default();
        let pred = self.predict_v(&x_t, &batch.source, t, guide)?;
        v_loss(&pred, &v)
    }

    /// Deterministic DDIM (η = 0) from the given `x_T`; returns signed images.
    pub fn ddim_sample_tensor(&self, source: &Tensor, cond: &Conditions, noise: &Tensor, steps: usize) -> Result<Tensor> {
        let ts = self.schedule.sampling_timesteps(steps)?;
        let b = source.dim(0)?;
        let mut x = noise.clone();
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            let v = self.predict_v(&x, source, &vec![t; b], cond.guidance())?;
            // Sampling never backpropagates; drop each step's graph.
            x = self.schedule.ddim_step(&x, &v, t, t_prev)?.0.detach();
        }
        Ok(x.clamp(-1.0, 1.0)?)
    }

    pub fn initial_noise(&self, seed: u64, h: usize, w: usize) -> Result<Tensor> {
        rng::normal_tensor(
            &mut rng::stream(seed, NOISE_STREAM),
            (1, self.cfg.denoiser.image_channels, h, w),
            self.dtype(),
            &Device::Cpu,
        )
    }

    /// Relights `source` (with intrinsic map `A_o`) toward a target code and
    /// its embedding. The seed only sets the initial noise.
    pub fn ddim_sample(
        &self,
        source: &ImageTensor,
        intrinsic: &IntrinsicMap,
        target_code: &LightCode,
        target_embedding: &LightEmbedding,
        steps: usize,
        seed: u64,
    ) -> Result<ImageTensor> {
        self.check_image(source.height(), source.width())?;
        let dt = self.dtype();
        let a = intrinsic.tensor().to_dtype(dt)?;
        let c = target_code.to_tensor(dt, &Device::Cpu)?;
        let concat = expand_and_concat_tensor(&a, &c)?;
        let (_, residues) = self.control.forward(&self.store, &concat)?;
        let cond = Conditions {
            residues,
            context: target_embedding.tensor().to_dtype(dt)?,
        };
        let src = source.to_signed_tensor(dt, &Device::Cpu)?;
        let noise = self.initial_noise(seed, source.height(), source.width())?;
        ImageTensor::from_signed_tensor(&self.ddim_sample_tensor(&src, &cond, &noise, steps)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let partitions: std::collections::BTreeMap<String, String> = self
            .store
            .partitions()
            .into_iter()
            .map(|(k, p)| (k, p.as_str().to_string()))
            .collect();
        Ok(Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "version": CHECKPOINT_VERSION,
                "partitions": partitions,
                "schedule": self.cfg.schedule,
                "timesteps": self.cfg.timesteps,
                "resolution": self.cfg.resolution,
                "adaptor_activation": ADAPTOR_ACTIVATION,
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
                "luminet checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let cfg: LuminetConfig = ckpt.meta_field("config")?;
        if ckpt.meta_field::<ScheduleKind>("schedule")? != cfg.schedule
            || ckpt.meta_field::<usize>("timesteps")? != cfg.timesteps
            || ckpt.meta_field::<usize>("resolution")? != cfg.resolution
        {
            return Err(Error::checkpoint("luminet checkpoint header is inconsistent"));
        }
        let mut model = Self::new(cfg, dtype)?;
        let expected = model.store.partitions();
        let stated: std::collections::BTreeMap<String, String> = ckpt.meta_field("partitions")?;
        let params: Vec<&TensorRecord> = ckpt.tensors.iter().filter(|t| t.partition.is_some()).collect();
        let consistent = stated.len() == expected.len()
            && expected.iter().all(|(k, p)| stated.get(k).map(String::as_str) == Some(p.as_str()))
            && params.len() == expected.len()
            && params.iter().all(|t| expected.get(&t.name) == t.partition.as_ref());
        if !consistent {
            return Err(Error::checkpoint("luminet checkpoint tensors do not match the architecture"));
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

/// Mean squared v-prediction error.
pub fn v_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    mse(pred, target)
}

/// A batch of same-scene pairs in signed range with the source intrinsic map
/// and the target lighting code.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub source: Tensor,
    pub target: Tensor,
    pub intrinsic: Tensor,
    pub code: Tensor,
}

/// A paired image set with every image pre-encoded by a frozen intrinsics
/// model.
pub struct EncodedPairs {
    pub images: PairedImages,
    signed: Vec<Vec<Tensor>>,
    intrinsic: Vec<Vec<Tensor>>,
    code: Vec<Vec<Tensor>>,
}

impl EncodedPairs {
    pub fn new(images: PairedImages, intrinsics: &IntrinsicsModel, dtype: DType) -> Result<Self> {
        let (h, w, _) = images.image_dims();
        intrinsics.check_dims(h, w)?;
        let (mut signed, mut intrinsic, mut code) = (Vec::new(), Vec::new(), Vec::new());
        for s in &images.scenes {
            let imgs: Vec<ImageTensor> = s.lights.iter().map(|(_, i)| i.clone()).collect();
            let x = ImageTensor::batch_to_signed_tensor(&imgs, intrinsics.dtype(), &Device::Cpu)?;
            let (a, c) = intrinsics.encode_tensor(&x)?;
            let n = imgs.len();
            let x = x.to_dtype(dtype)?;
            let (a, c) = (a.to_dtype(dtype)?, c.to_dtype(dtype)?);
            signed.push((0..n).map(|i| x.narrow(0, i, 1)).collect::<candle_core::Result<Vec<_>>>()?);
            intrinsic.push((0..n).map(|i| a.narrow(0, i, 1)).collect::<candle_core::Result<Vec<_>>>()?);
            code.push((0..n).map(|i| c.narrow(0, i, 1)).collect::<candle_core::Result<Vec<_>>>()?);
        }
        Ok(Self {
            images,
            signed,
            intrinsic,
            code,
        })
    }

    /// Source `(s, a)` relit toward the lighting of `(s, b)`.
    pub fn batch_of(&self, pairs: &[(usize, usize, usize)]) -> Result<PairBatch> {
        let pick = |v: &Vec<Vec<Tensor>>, which: &dyn Fn(&(usize, usize, usize)) -> (usize, usize)| -> Result<Tensor> {
            let parts: Vec<&Tensor> = pairs
                .iter()
                .map(|p| {
                    let (s, l) = which(p);
                    &v[s][l]
                })
                .collect();
            Ok(Tensor::cat(&parts, 0)?)
        };
        Ok(PairBatch {
            source: pick(&self.signed, &|&(s, a, _)| (s, a))?,
            target: pick(&self.signed, &|&(s, _, b)| (s, b))?,
            intrinsic: pick(&self.intrinsic, &|&(s, a, _)| (s, a))?,
            code: pick(&self.code, &|&(s, _, b)| (s, b))?,
        })
    }

    pub fn sample_batch(&self, rng: &mut Rng, batch: usize, p_self: f64) -> Result<PairBatch> {
        let pairs = (0..batch.max(1))
            .map(|_| self.images.sample_pair_or_self_index(rng, p_self))
            .collect::<Result<Vec<_>>>()?;
        self.batch_of(&pairs)
    }
}

/// Which parameters a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    /// Unconditioned denoiser pretraining on all partitions labelled base.
    Base,
    /// Fine-tuning of control, cross-attention and adaptor with the base frozen.
    Luminet,
}

impl TrainStage {
    pub fn trainable(&self) -> &'static [Partition] {
        match self {
            TrainStage::Base => &[Partition::Base],
            TrainStage::Luminet => &Partition::LUMINET_TRAINABLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LuminetTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    /// Probability of a self-pair (source and target identical).
    pub p_self: f64,
    pub seed: u64,
}

impl Default for LuminetTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 8,
            lr: 1e-4,
            schedule: LrSchedule::Constant,
            weight_decay: 1e-2,
            p_self: 0.0,
            seed: 0,
        }
    }
}

impl LuminetTrainConfig {
    /// `AdamW(lr = 4e-5)` as published for the full-size backbone.
    pub fn full_scale() -> Self {
        Self {
            lr: 4e-5,
            ..Self::default()
        }
    }
}

pub struct LuminetTrainer {
    pub model: LuminetModel,
    opt: AdamW,
    cfg: LuminetTrainConfig,
    stage: TrainStage,
    frozen: Vec<(String, candle_core::Var)>,
    rng: Rng,
    step: usize,
}

impl LuminetTrainer {
    pub fn new(mut model: LuminetModel, cfg: LuminetTrainConfig, stage: TrainStage) -> Result<Self> {
        let trainable = stage.trainable();
        let frozen_parts: Vec<Partition> = [
            Partition::Base,
            Partition::Control,
            Partition::CrossAttn,
            Partition::Adaptor,
        ]
        .into_iter()
        .filter(|p| !trainable.contains(p))
        .collect();
        model.store.set_frozen(frozen_parts.iter().copied());
        let opt = AdamW::new(
            model.store.vars_in(trainable),
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        let frozen = model.store.vars_in(&frozen_parts);
        let rng = rng::stream(cfg.seed, 21);
        Ok(Self {
            model,
            opt,
            cfg,
            stage,
            frozen,
            rng,
            step: 0,
        })
    }

    pub fn stage(&self) -> TrainStage {
        self.stage
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

    pub fn resume_at(&mut self, step: usize) {
        self.step = step;
        self.rng = rng::stream(self.cfg.seed ^ step as u64, 21);
    }

    /// Hands the model back with every partition trainable again.
    pub fn into_model(mut self) -> LuminetModel {
        self.model.store.set_frozen([]);
        self.model
    }

    /// One optimizer step on `batch` with uniformly drawn `t ∈ [1, T]` and
    /// fresh Gaussian noise.
    pub fn training_step(&mut self, batch: &PairBatch) -> Result<LossRow> {
        use rand::Rng as _;
        let b = batch.target.dim(0)?;
        let big_t = self.model.schedule.steps();
        let t: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=big_t)).collect();
        let eps = rng::normal_tensor(&mut self.rng, batch.target.shape(), self.model.dtype(), &Device::Cpu)?;
        let lr = self.cfg.schedule.lr_at(self.cfg.lr, self.step, self.cfg.steps);
        self.opt.set_lr(lr);
        let conditioned = self.stage == TrainStage::Luminet;
        let loss = self.model.loss(batch, &t, &eps, conditioned)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::data(format!("diffusion loss diverged at step {}", self.step + 1)));
        }
        let grads = loss.backward()?;
        for (name, var) in &self.frozen {
            assert!(
                grads.get(var.as_tensor()).is_none(),
                "frozen parameter {name} received a gradient"
            );
        }
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(LossRow {
            step: self.step as u64,
            loss: value,
            lr,
        })
    }

    pub fn train_step(&mut self, data: &EncodedPairs) -> Result<LossRow> {
        let p_self = self.cfg.p_self;
        let batch = data.sample_batch(&mut self.rng, self.cfg.batch, p_self)?;
        self.training_step(&batch)
    }

    pub fn run(&mut self, data: &EncodedPairs, steps: usize, mut on_row: impl FnMut(&LossRow)) -> Result<Vec<LossRow>> {
        let start = Instant::now();
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let row = self.train_step(data)?;
            if row.step % 100 == 0 {
                log::info!(
                    "{:?} step {} loss {:.5} ({:.0?})",
                    self.stage,
                    row.step,
                    row.loss,
                    start.elapsed()
                );
            }
            on_row(&row);
            log.push(row);
        }
        Ok(log)
    }
}

/// The frozen intrinsics model plus the conditioned denoiser.
pub struct RelightPipeline {
    pub intrinsics: IntrinsicsModel,
    pub luminet: LuminetModel,
}

pub struct RelightRequest<'a> {
    pub source: ImageTensor,
    pub target: ImageTensor,
    pub seed: u64,
    pub steps: usize,
    pub enhancer: Option<&'a dyn PostEnhancer>,
}

impl<'a> RelightRequest<'a> {
    pub fn new(source: ImageTensor, target: ImageTensor) -> Self {
        Self {
            source,
            target,
            seed: 0,
            steps: DEFAULT_SAMPLING_STEPS,
            enhancer: None,
        }
    }
}

impl RelightPipeline {
    pub fn new(intrinsics: IntrinsicsModel, luminet: LuminetModel) -> Result<Self> {
        let (ic, lc) = (intrinsics.config(), &luminet.config().conditioning);
        if ic.c_int != lc.c_int || ic.d_light != lc.d_light {
            return Err(Error::checkpoint(format!(
                "intrinsics model ({}, {}) and luminet conditioning ({}, {}) disagree on (c_int, d_light)",
                ic.c_int, ic.d_light, lc.c_int, lc.d_light
            )));
        }
        Ok(Self { intrinsics, luminet })
    }

    fn check(&self, source: &ImageTensor, target: &ImageTensor) -> Result<()> {
        for img in [source, target] {
            self.luminet.check_image(img.height(), img.width())?;
            self.intrinsics.check_dims(img.height(), img.width())?;
        }
        Ok(())
    }

    /// `encode(source) → A_o`, `encode(target) → c_t`, condition, sample,
    /// then the optional enhancer.
    pub fn relight(&self, req: &RelightRequest<'_>) -> Result<ImageTensor> {
        self.check(&req.source, &req.target)?;
        let (a_o, _) = self.intrinsics.encode(&req.source)?;
        let (_, c_t) = self.intrinsics.encode(&req.target)?;
        let emb = self.luminet.embedding(&c_t)?;
        let out = self.luminet.ddim_sample(&req.source, &a_o, &c_t, &emb, req.steps, req.seed)?;
        match req.enhancer {
            Some(e) => e.enhance(&out),
            None => Ok(out),
        }
    }

    /// Many relights in one batched sampling pass; row `i` uses `seeds[i]`
    /// and matches [`RelightPipeline::relight`] for the same inputs.
    pub fn relight_batch(&self, sources: &[ImageTensor], targets: &[ImageTensor], seeds: &[u64], steps: usize) -> Result<Vec<ImageTensor>> {
        if sources.len() != targets.len() || sources.len() != seeds.len() {
            return Err(Error::invalid("relight batch needs equal numbers of sources, targets and seeds"));
        }
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        for (s, t) in sources.iter().zip(targets) {
            self.check(s, t)?;
        }
        let idt = self.intrinsics.dtype();
        let (a_o, _) = self.intrinsics.encode_tensor(&ImageTensor::batch_to_signed_tensor(sources, idt, &Device::Cpu)?)?;
        let (_, c_t) = self.intrinsics.encode_tensor(&ImageTensor::batch_to_signed_tensor(targets, idt, &Device::Cpu)?)?;
        let cond = self.luminet.conditions(&a_o, &c_t)?;
        let dt = self.luminet.dtype();
        let src = ImageTensor::batch_to_signed_tensor(sources, dt, &Device::Cpu)?;
        let (h, w) = (sources[0].height(), sources[0].width());
        let noise = seeds
            .iter()
            .map(|&s| self.luminet.initial_noise(s, h, w))
            .collect::<Result<Vec<_>>>()?;
        let out = self.luminet.ddim_sample_tensor(&src, &cond, &Tensor::cat(&noise, 0)?, steps)?;
        ImageTensor::batch_from_signed_tensor(&out)
    }
}
