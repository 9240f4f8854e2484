mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use luminet::diffusion::{
    make_schedule, Conditions, Guidance, LuminetModel, LuminetTrainConfig, LuminetTrainer, RelightPipeline,
    RelightRequest, ScheduleKind, TrainStage,
};
use luminet::intrinsics::IntrinsicsModel;
use luminet::nn::Partition;
use luminet::train::LrSchedule;
use proptest::prelude::*;

fn scalar_alpha_bar(kind: ScheduleKind, steps: usize) -> Vec<f64> {
    let mut ab = vec![1.0f64];
    match kind {
        ScheduleKind::Linear => {
            let mut prod = 1.0;
            for i in 0..steps {
                let beta = 1e-4 + (2e-2 - 1e-4) * i as f64 / (steps - 1) as f64;
                prod *= 1.0 - beta;
                ab.push(prod);
            }
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| (((t / steps as f64) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let mut prod = 1.0;
            for i in 1..=steps {
                let beta = (1.0 - f(i as f64) / f((i - 1) as f64)).clamp(1e-8, 0.999);
                prod *= 1.0 - beta;
                ab.push(prod);
            }
        }
    }
    ab
}

#[test]
fn schedules_match_a_scalar_oracle() {
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let s = make_schedule(1000, kind).unwrap();
        let oracle = scalar_alpha_bar(kind, 1000);
        for (a, b) in s.alpha_bar().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12 * b.max(1e-3), "{kind}: {a} vs {b}");
        }
    }
}

#[test]
fn ddim_step_matches_a_scalar_oracle() {
    let s = make_schedule(1000, ScheduleKind::Cosine).unwrap();
    let x = randn(1, &[2, 3, 4, 4], DType::F64);
    let v = randn(2, &[2, 3, 4, 4], DType::F64);
    let (t, tp) = (600, 580);
    let (next, x0) = s.ddim_step(&x, &v, t, tp).unwrap();
    let (sa, sn) = (s.alpha_bar()[t].sqrt(), (1.0 - s.alpha_bar()[t]).sqrt());
    let (pa, pn) = (s.alpha_bar()[tp].sqrt(), (1.0 - s.alpha_bar()[tp]).sqrt());
    for ((xi, vi), (ni, x0i)) in values(&x).iter().zip(values(&v)).zip(values(&next).iter().zip(values(&x0))) {
        let x0o = (sa * xi - sn * vi).clamp(-1.0, 1.0);
        let eo = (xi - sa * x0o) / sn;
        assert!((x0i - x0o).abs() < 1e-12);
        assert!((ni - (pa * x0o + pn * eo)).abs() < 1e-12);
    }
}

#[test]
fn ddim_with_a_perfect_predictor_lands_on_the_clean_image() {
    let s = make_schedule(1000, ScheduleKind::Cosine).unwrap();
    let target = (randn(3, &[1, 3, 8, 8], DType::F64).tanh().unwrap() * 0.9).unwrap();
    let mut x = randn(4, &[1, 3, 8, 8], DType::F64);
    let ts = s.sampling_timesteps(50).unwrap();
    for (i, &t) in ts.iter().enumerate() {
        let eps = ((&x - (&target * s.signal(t)).unwrap()).unwrap() / s.noise(t)).unwrap();
        let v = s.vpred(&target, &eps, &[t]).unwrap();
        x = s.ddim_step(&x, &v, t, ts.get(i + 1).copied().unwrap_or(0)).unwrap().0;
    }
    for (a, b) in values(&x).iter().zip(values(&target)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn sampling_uses_every_requested_step_once() {
    let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
    let ts = s.sampling_timesteps(50).unwrap();
    assert_eq!(ts.len(), 50);
    assert_eq!((ts[0], ts[49]), (1000, 20));
    assert!(s.sampling_timesteps(0).is_err());
    assert!(s.sampling_timesteps(1001).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn v_prediction_round_trips(seed in 0u64..10_000, t in 0usize..=1000, linear in any::<bool>()) {
        let kind = if linear { ScheduleKind::Linear } else { ScheduleKind::Cosine };
        let s = make_schedule(1000, kind).unwrap();
        let x0 = randn(seed, &[1, 3, 2, 2], DType::F64);
        let eps = randn(seed + 1, &[1, 3, 2, 2], DType::F64);
        let xt = s.q_sample(&x0, &[t], &eps).unwrap();
        let v = s.vpred(&x0, &eps, &[t]).unwrap();
        let x0r = s.x0_from(&v, &xt, &[t]).unwrap();
        let er = s.eps_from(&v, &xt, &[t]).unwrap();
        for (a, b) in values(&x0).iter().zip(values(&x0r)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in values(&eps).iter().zip(values(&er)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn per_row_timesteps_equal_single_row_calls(seed in 0u64..1000, t0 in 0usize..=100, t1 in 0usize..=100) {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let x0 = randn(seed, &[2, 3, 2, 2], DType::F64);
        let eps = randn(seed + 7, &[2, 3, 2, 2], DType::F64);
        let both = s.q_sample(&x0, &[t0, t1], &eps).unwrap();
        for (row, t) in [(0, t0), (1, t1)] {
            let one = s.q_sample(&x0.narrow(0, row, 1).unwrap(), &[t], &eps.narrow(0, row, 1).unwrap()).unwrap();
            prop_assert_eq!(bits(&both.narrow(0, row, 1).unwrap()), bits(&one));
        }
    }
}

#[test]
fn fresh_model_emits_zero_residues_but_one_step_makes_them_nonzero() {
    let (_dir, data) = toy_pairs(2, 3, 16, 1);
    let data = encoded(data, DType::F32);
    let model = tiny_model(16, DType::F32);
    let batch = data.batch_of(&[(0, 0, 1), (1, 2, 0)]).unwrap();
    let cond = model.conditions(&batch.intrinsic, &batch.code).unwrap();
    assert_eq!(cond.residues.len(), 3);
    for r in &cond.residues {
        assert!(values(r).iter().all(|&v| v == 0.0));
    }
    let mut trainer = LuminetTrainer::new(
        model,
        LuminetTrainConfig {
            steps: 1,
            batch: 2,
            lr: 1e-3,
            ..LuminetTrainConfig::default()
        },
        TrainStage::Luminet,
    )
    .unwrap();
    trainer.training_step(&batch).unwrap();
    let cond = trainer.model.conditions(&batch.intrinsic, &batch.code).unwrap();
    assert!(cond.residues.iter().all(|r| values(r).iter().any(|&v| v != 0.0)));
}

#[test]
fn residues_match_the_denoiser_levels() {
    let model = tiny_model(32, DType::F32);
    let a = randn(1, &[1, 4, 4, 4], DType::F32);
    let c = randn(2, &[1, 3], DType::F32);
    let cond = model.conditions(&a, &c).unwrap();
    let dims: Vec<Vec<usize>> = cond.residues.iter().map(|r| r.dims().to_vec()).collect();
    assert_eq!(dims, vec![vec![1, 8, 32, 32], vec![1, 16, 16, 16], vec![1, 16, 16, 16]]);
    assert_eq!(cond.context.dims(), &[1, 2, 8]);
}

#[test]
fn base_stage_trains_only_the_base_partition() {
    let (_dir, data) = toy_pairs(2, 3, 16, 2);
    let data = encoded(data, DType::F32);
    let model = tiny_model(16, DType::F32);
    let before: Vec<String> = [Partition::Base, Partition::Control, Partition::CrossAttn, Partition::Adaptor]
        .iter()
        .map(|p| model.store().digest(&[*p]).unwrap())
        .collect();
    let cfg = LuminetTrainConfig {
        steps: 3,
        batch: 2,
        lr: 1e-3,
        schedule: LrSchedule::Constant,
        ..LuminetTrainConfig::default()
    };
    let mut trainer = LuminetTrainer::new(model, cfg, TrainStage::Base).unwrap();
    trainer.run(&data, 3, |_| {}).unwrap();
    let model = trainer.into_model();
    let after: Vec<String> = [Partition::Base, Partition::Control, Partition::CrossAttn, Partition::Adaptor]
        .iter()
        .map(|p| model.store().digest(&[*p]).unwrap())
        .collect();
    assert_ne!(before[0], after[0]);
    assert_eq!(before[1..], after[1..]);
}

#[test]
fn checkpoint_round_trip_preserves_every_tensor_and_the_sampler() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(16, DType::F32);
    let path = dir.path().join("luminet.ckpt");
    model.save(&path).unwrap();
    let back = LuminetModel::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.store().partitions(), model.store().partitions());
    let all = [Partition::Base, Partition::Control, Partition::CrossAttn, Partition::Adaptor];
    assert_eq!(back.store().digest(&all).unwrap(), model.store().digest(&all).unwrap());

    let src = randn(5, &[1, 3, 16, 16], DType::F32).tanh().unwrap();
    let cond = model.conditions(&randn(6, &[1, 4, 2, 2], DType::F32), &randn(7, &[1, 3], DType::F32)).unwrap();
    let cond_b = back.conditions(&randn(6, &[1, 4, 2, 2], DType::F32), &randn(7, &[1, 3], DType::F32)).unwrap();
    let noise = model.initial_noise(9, 16, 16).unwrap();
    let a = model.ddim_sample_tensor(&src, &cond, &noise, 5).unwrap();
    let b = back.ddim_sample_tensor(&src, &cond_b, &noise, 5).unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn checkpoint_with_a_relabelled_partition_is_rejected() {
    let mut ckpt = tiny_model(16, DType::F32).to_checkpoint().unwrap();
    let rec = ckpt.tensors.iter_mut().find(|t| t.partition == Some(Partition::Adaptor)).unwrap();
    rec.partition = Some(Partition::Base);
    assert!(LuminetModel::from_checkpoint(&ckpt, DType::F32).is_err());

    let mut ckpt = tiny_model(16, DType::F32).to_checkpoint().unwrap();
    ckpt.meta["version"] = serde_json::json!(99);
    assert!(LuminetModel::from_checkpoint(&ckpt, DType::F32).is_err());
}

#[test]
fn sampling_is_deterministic_given_the_seed() {
    let intr = IntrinsicsModel::new(tiny_intrinsics(), DType::F32).unwrap();
    let pipe = RelightPipeline::new(intr, tiny_model(16, DType::F32)).unwrap();
    let (src, tgt) = (random_image(1, 16, 16), random_image(2, 16, 16));
    let mut req = RelightRequest::new(src.clone(), tgt.clone());
    req.steps = 4;
    req.seed = 11;
    let a = pipe.relight(&req).unwrap();
    let b = pipe.relight(&req).unwrap();
    assert_eq!(a, b);
    req.seed = 12;
    assert_ne!(pipe.relight(&req).unwrap(), a);
}

#[test]
fn batched_relight_matches_single_relights() {
    let intr = IntrinsicsModel::new(tiny_intrinsics(), DType::F32).unwrap();
    let pipe = RelightPipeline::new(intr, tiny_model(16, DType::F32)).unwrap();
    let srcs = vec![random_image(1, 16, 16), random_image(3, 16, 16)];
    let tgts = vec![random_image(2, 16, 16), random_image(4, 16, 16)];
    let batch = pipe.relight_batch(&srcs, &tgts, &[5, 6], 3).unwrap();
    for i in 0..2 {
        let mut req = RelightRequest::new(srcs[i].clone(), tgts[i].clone());
        req.steps = 3;
        req.seed = [5, 6][i];
        let one = pipe.relight(&req).unwrap();
        let worst = one.data().iter().zip(batch[i].data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst < 1e-4, "row {i} differs by {worst}");
    }
}

#[test]
fn pipeline_rejects_mismatched_models_and_sizes() {
    let mut cfg = tiny_intrinsics();
    cfg.c_int = 5;
    let intr = IntrinsicsModel::new(cfg, DType::F32).unwrap();
    assert!(RelightPipeline::new(intr, tiny_model(16, DType::F32)).is_err());

    let intr = IntrinsicsModel::new(tiny_intrinsics(), DType::F32).unwrap();
    let pipe = RelightPipeline::new(intr, tiny_model(16, DType::F32)).unwrap();
    let req = RelightRequest::new(random_image(1, 32, 32), random_image(2, 32, 32));
    assert!(pipe.relight(&req).is_err());
}

#[test]
fn unconditioned_guidance_is_the_default() {
    let model = tiny_model(16, DType::F64);
    let x = randn(1, &[1, 3, 16, 16], DType::F64);
    let src = randn(2, &[1, 3, 16, 16], DType::F64);
    let a = model.predict_v(&x, &src, &[10], Guidance::default()).unwrap();
    let cond = Conditions {
        residues: model.conditions(&randn(3, &[1, 4, 2, 2], DType::F64), &randn(4, &[1, 3], DType::F64)).unwrap().residues,
        context: Tensor::zeros((1, 2, 8), DType::F64, &Device::Cpu).unwrap(),
    };
    let b = model.predict_v(&x, &src, &[10], cond.guidance()).unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn clean_zero_image_diffuses_to_scaled_noise() {
    let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
    let eps = randn(4, &[2, 3, 4, 4], DType::F64);
    let x0 = Tensor::zeros((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
    for t in [1, 250, 999, 1000] {
        let xt = values(&s.q_sample(&x0, &[t, t], &eps).unwrap());
        let k = (1.0 - s.alpha_bar()[t]).sqrt();
        for (x, e) in xt.iter().zip(values(&eps)) {
            assert!((x - k * e).abs() <= 1e-15 * (1.0 + e.abs()));
        }
    }
}

#[test]
fn forward_process_variance_matches_the_schedule() {
    let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
    let n = 100_000;
    let x0 = Tensor::full(0.3f64, (n,), &Device::Cpu).unwrap();
    let eps = randn(11, &[n], DType::F64);
    for t in [10, 300, 700] {
        let xt = values(&s.q_sample(&x0, &vec![t; n], &eps).unwrap());
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = 1.0 - s.alpha_bar()[t];
        assert!((var / expect - 1.0).abs() <= 0.02, "t={t}: {var} vs {expect}");
    }
}

#[test]
fn loss_is_zero_for_a_perfect_prediction_and_positive_at_init() {
    let v = randn(2, &[2, 3, 4, 4], DType::F32);
    assert_eq!(luminet::diffusion::model::v_loss(&v, &v).unwrap().to_scalar::<f32>().unwrap(), 0.0);

    let (_dir, data) = toy_pairs(2, 3, 16, 1);
    let enc = encoded(data, DType::F32);
    let model = tiny_model(16, DType::F32);
    let batch = enc.sample_batch(&mut luminet::rng::seeded(0), 4, 0.0).unwrap();
    let eps = randn(3, &[4, 3, 16, 16], DType::F32);
    for conditioned in [false, true] {
        let l = model.loss(&batch, &[5, 30, 60, 99], &eps, conditioned).unwrap().to_scalar::<f32>().unwrap();
        assert!(l.is_finite() && l > 0.0, "loss {l}");
    }
}
