#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use luminet::conditioning::ConditioningConfig;
use luminet::datagen::build_paired_dataset;
use luminet::diffusion::{DenoiserConfig, EncodedPairs, LuminetConfig, LuminetModel, ScheduleKind};
use luminet::image::ImageTensor;
use luminet::intrinsics::{IntrinsicsConfig, IntrinsicsModel};
use luminet::rng;
use luminet::train::PairedImages;

pub fn tiny_intrinsics() -> IntrinsicsConfig {
    IntrinsicsConfig {
        c_int: 4,
        d_light: 3,
        widths: [4, 8, 8],
        seed: 3,
    }
}

pub fn tiny_luminet(resolution: usize) -> LuminetConfig {
    LuminetConfig {
        resolution,
        denoiser: DenoiserConfig {
            image_channels: 3,
            base_channels: 8,
            channel_mults: vec![1, 2],
            groups: 4,
            heads: 2,
        },
        conditioning: ConditioningConfig {
            c_int: 4,
            d_light: 3,
            c_ctrl: 8,
            n_tok: 2,
            d_emb: 8,
            adaptor_widths: [6, 12, 12, 12, 16],
        },
        schedule: ScheduleKind::Cosine,
        timesteps: 100,
        seed: 5,
    }
}

pub fn tiny_model(resolution: usize, dtype: DType) -> LuminetModel {
    LuminetModel::new(tiny_luminet(resolution), dtype).unwrap()
}

/// Renders a toy set; the tempdir must outlive any lazily read file.
pub fn toy_pairs(scenes: usize, lights: usize, size: usize, seed: u64) -> (tempfile::TempDir, PairedImages) {
    let dir = tempfile::tempdir().unwrap();
    let m = build_paired_dataset(scenes, lights, seed, size, dir.path()).unwrap();
    let data = PairedImages::load(&m).unwrap();
    (dir, data)
}

pub fn encoded(data: PairedImages, dtype: DType) -> EncodedPairs {
    let intr = IntrinsicsModel::new(tiny_intrinsics(), dtype).unwrap();
    EncodedPairs::new(data, &intr, dtype).unwrap()
}

pub fn randn(seed: u64, shape: &[usize], dtype: DType) -> Tensor {
    rng::normal_tensor(&mut rng::seeded(seed), shape, dtype, &Device::Cpu).unwrap()
}

pub fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    use rand::Rng as _;
    let mut r = rng::seeded(seed);
    ImageTensor::new(h, w, 3, (0..h * w * 3).map(|_| r.random::<f32>()).collect()).unwrap()
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
        .into_iter()
        .map(f64::to_bits)
        .collect()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}
