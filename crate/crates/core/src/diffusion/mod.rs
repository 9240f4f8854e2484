//! Pixel-space v-prediction diffusion conditioned on latent intrinsics.
//!
//! The denoiser sees the noisy target next to the source image. A control
//! branch over the source intrinsic map and the target lighting code adds
//! residues to its encoder, and the adaptor's lighting tokens are the whole
//! cross-attention context. Fine-tuning updates only the control,
//! cross-attention and adaptor partitions.

pub mod model;
pub mod schedule;
pub mod unet;

pub use model::{
    v_loss, Conditions, EncodedPairs, LuminetConfig, LuminetModel, LuminetTrainConfig, LuminetTrainer, PairBatch,
    RelightPipeline, RelightRequest, TrainStage, DEFAULT_SAMPLING_STEPS,
};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
pub use unet::{Denoiser, DenoiserConfig, Guidance};
