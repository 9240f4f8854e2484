mod common;

use common::*;
use luminet::evaluation::normals::rotation;
use luminet::evaluation::protocol::{eval_protocol, summary_table, IdentityRelighter, OracleRelighter, ProtocolConfig};
use luminet::evaluation::{
    aggregate_rankings, color_correct_with, median_angular_error, rmse, ssim, ColorCorrection, NormalMap,
    RankingResponse,
};
use luminet::image::ImageTensor;
use proptest::prelude::*;

#[test]
fn oracle_relighter_scores_perfectly() {
    let (_dir, data) = toy_pairs(3, 5, 16, 4);
    let report = eval_protocol(&OracleRelighter, &data, &ProtocolConfig::new(4, 2, 1)).unwrap();
    assert_eq!(report.records.len(), 3 * 4 * 2);
    let a = report.aggregates;
    assert_eq!((a.rmse_raw, a.ssim_raw), (0.0, 1.0));
    assert!(a.rmse_cc < 1e-6 && (a.ssim_cc - 1.0).abs() < 1e-6);
    assert_eq!(report.per_repeat.len(), 2);
}

#[test]
fn identity_relighter_is_worse_than_the_oracle() {
    let (_dir, data) = toy_pairs(3, 5, 16, 4);
    let cfg = ProtocolConfig::new(2, 1, 3);
    let id = eval_protocol(&IdentityRelighter, &data, &cfg).unwrap();
    let or = eval_protocol(&OracleRelighter, &data, &cfg).unwrap();
    assert!(id.aggregates.rmse_raw > or.aggregates.rmse_raw);
    assert!(id.aggregates.rmse_cc <= id.aggregates.rmse_raw + 1e-12);
    let table = summary_table(&[id, or]);
    assert!(table.contains("Input Img") && table.contains("Oracle") && table.contains("Color Correction"));
}

#[test]
fn protocol_targets_are_distinct_other_lights() {
    let (_dir, data) = toy_pairs(2, 6, 16, 5);
    let r = eval_protocol(&IdentityRelighter, &data, &ProtocolConfig::new(5, 3, 9)).unwrap();
    for rep in 0..3 {
        for scene in ["scene_0000", "scene_0001"] {
            let recs: Vec<_> = r.records.iter().filter(|x| x.repeat == rep && x.scene == scene).collect();
            assert_eq!(recs.len(), 5);
            let src = recs[0].src_light;
            let mut tgts: Vec<u32> = recs.iter().map(|x| x.tgt_light).collect();
            assert!(recs.iter().all(|x| x.src_light == src) && !tgts.contains(&src));
            tgts.sort();
            tgts.dedup();
            assert_eq!(tgts.len(), 5);
        }
    }
}

#[test]
fn protocol_needs_enough_lights() {
    let (_dir, data) = toy_pairs(1, 3, 16, 5);
    let err = eval_protocol(&IdentityRelighter, &data, &ProtocolConfig::new(3, 1, 0)).unwrap_err();
    assert!(err.to_string().contains("scene_0000"));
    assert!(eval_protocol(&IdentityRelighter, &data, &ProtocolConfig::new(2, 0, 0)).is_err());
}

#[test]
fn different_seeds_draw_different_pairs() {
    let (_dir, data) = toy_pairs(4, 7, 16, 6);
    let a = eval_protocol(&IdentityRelighter, &data, &ProtocolConfig::new(2, 2, 1)).unwrap();
    let b = eval_protocol(&IdentityRelighter, &data, &ProtocolConfig::new(2, 2, 2)).unwrap();
    let key = |r: &luminet::evaluation::EvalReport| -> Vec<(u32, u32)> {
        r.records.iter().map(|x| (x.src_light, x.tgt_light)).collect()
    };
    assert_ne!(key(&a), key(&b));
}

#[test]
fn report_json_round_trips_and_csv_has_one_row() {
    let (_dir, data) = toy_pairs(2, 3, 16, 7);
    let r = eval_protocol(&IdentityRelighter, &data, &ProtocolConfig::new(2, 1, 0)).unwrap();
    let back: luminet::evaluation::EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.aggregates_csv().lines().count(), 2);
}

#[test]
fn rotated_normals_report_the_rotation_angle() {
    let (h, w) = (8, 8);
    let normals: Vec<[f64; 3]> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / 8.0 - 0.5, (i % w) as f64 / 8.0 - 0.5);
            let z = (1.0 - x * x - y * y).sqrt();
            [x, y, z]
        })
        .collect();
    let m = NormalMap::dense(h, w, normals).unwrap();
    for axis in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.3, -0.4, 0.866]] {
        let r = m.rotated(rotation(axis, 10.0)).unwrap();
        let e = median_angular_error(&m, &r).unwrap();
        assert!(e <= 10.0 + 1e-9, "axis {axis:?}: {e}");
    }
    // About an axis perpendicular to every normal the angle is exact.
    let flat = NormalMap::dense(1, 3, vec![[0.0, 0.0, 1.0]; 3]).unwrap();
    let e = median_angular_error(&flat, &flat.rotated(rotation([1.0, 0.0, 0.0], 10.0)).unwrap()).unwrap();
    assert!((e - 10.0).abs() < 1e-9);
}

#[test]
fn masked_pixels_are_ignored() {
    let a = NormalMap::new(1, 2, vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], vec![true, false]).unwrap();
    let b = NormalMap::new(1, 2, vec![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]], vec![true, true]).unwrap();
    assert_eq!(median_angular_error(&a, &b).unwrap(), 0.0);
}

#[test]
fn even_median_averages_the_middle_pair() {
    let z = [0.0, 0.0, 1.0];
    let a = NormalMap::dense(1, 2, vec![z, z]).unwrap();
    let r = rotation([1.0, 0.0, 0.0], 20.0);
    let tilt = std::array::from_fn(|i| r[i][2]);
    let b = NormalMap::dense(1, 2, vec![z, tilt]).unwrap();
    assert!((median_angular_error(&a, &b).unwrap() - 10.0).abs() < 1e-9);
}

#[test]
fn ranking_aggregation_matches_a_hand_count() {
    let r = |id: &str, q: Vec<[[u8; 4]; 3]>| RankingResponse {
        participant: id.into(),
        questions: q,
    };
    let s = aggregate_rankings(&[
        r("a", vec![[[1, 2, 3, 4], [2, 1, 3, 4], [4, 3, 2, 1]]]),
        r("b", vec![[[1, 2, 4, 3], [1, 2, 3, 4], [4, 3, 1, 2]], [[2, 1, 3, 4], [1, 2, 3, 4], [4, 3, 2, 1]]]),
    ])
    .unwrap();
    assert_eq!(s.answers, 3);
    assert!((s.means[0][0] - 4.0 / 3.0).abs() < 1e-12);
    assert!((s.means[2][2] - 5.0 / 3.0).abs() < 1e-12);
    assert!(aggregate_rankings(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (random_image(s1, 12, 12), random_image(s2 + 1000, 12, 12));
        prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
        let (x, y) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&x));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gain_correction_undoes_a_global_tint(s in 0u64..1000, r in 0.2f32..1.0, g in 0.2f32..1.0, b in 0.2f32..1.0) {
        let gt = random_image(s, 8, 8);
        let tint = [r, g, b];
        let pred = ImageTensor::new(8, 8, 3, gt.data().iter().enumerate().map(|(i, v)| v * tint[i % 3]).collect()).unwrap();
        let (cc, v) = color_correct_with(&pred, &gt, ColorCorrection::Gain).unwrap();
        for c in 0..3 {
            prop_assert!((v[c] * tint[c] as f64 - 1.0).abs() < 1e-4);
        }
        prop_assert!(rmse(&cc, &gt).unwrap() < 1e-5);
    }

    #[test]
    fn offset_correction_undoes_a_global_shift(s in 0u64..1000, d in -0.2f32..0.2) {
        let gt = ImageTensor::new(8, 8, 3, random_image(s, 8, 8).data().iter().map(|v| 0.25 + 0.5 * v).collect()).unwrap();
        let pred = ImageTensor::new(8, 8, 3, gt.data().iter().map(|v| v + d).collect()).unwrap();
        let (cc, _) = color_correct_with(&pred, &gt, ColorCorrection::Offset).unwrap();
        prop_assert!(rmse(&cc, &gt).unwrap() < 1e-5);
    }
}

#[test]
fn identity_report_equals_direct_source_target_rmse() {
    let (_dir, data) = toy_pairs(3, 5, 16, 6);
    let report = eval_protocol(&IdentityRelighter, &data, &ProtocolConfig::new(3, 2, 7)).unwrap();
    let image = |scene: &str, light: u32| {
        let s = data.scenes.iter().find(|s| s.scene == scene).unwrap();
        &s.lights.iter().find(|(l, _)| *l == light).unwrap().1
    };
    let mut total = 0.0;
    for r in &report.records {
        let direct = rmse(image(&r.scene, r.src_light), image(&r.scene, r.tgt_light)).unwrap();
        assert!((r.rmse_raw - direct).abs() <= 1e-12);
        total += direct;
    }
    let mean = total / report.records.len() as f64;
    assert!((report.aggregates.rmse_raw - mean).abs() <= 1e-12);
}

#[test]
fn protocol_with_twelve_references_is_reproducible() {
    let (_dir, data) = toy_pairs(2, 13, 16, 2);
    let cfg = ProtocolConfig::new(12, 3, 7);
    let a = eval_protocol(&IdentityRelighter, &data, &cfg).unwrap().to_json().unwrap();
    let b = eval_protocol(&IdentityRelighter, &data, &cfg).unwrap().to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn unanimous_first_place_means_one() {
    let r = |id: &str| RankingResponse {
        participant: id.into(),
        questions: vec![[[1, 2, 3, 4]; 3]; 2],
    };
    let s = aggregate_rankings(&[r("a"), r("b"), r("c")]).unwrap();
    assert!(s.means.iter().all(|m| m[0] == 1.0));
}
