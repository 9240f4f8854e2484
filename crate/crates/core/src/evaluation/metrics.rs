use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::{Error, Result};

/// `sqrt(mean((a − b)²))` over every pixel and channel.
pub fn rmse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data().len() as f64;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok((sse / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
        }
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a row-major plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the channel-mean gray planes.
///
/// Local statistics use a Gaussian window evaluated only where it fits
/// entirely inside the image, with population (biased) moments and
/// `C1 = (0.01·R)²`, `C2 = (0.03·R)²`.
pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, p: SsimParams) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, _) = a.dims();
    if h < p.window || w < p.window {
        return Err(Error::shape(format!(
            "image {h}x{w} is smaller than the {0}x{0} SSIM window",
            p.window
        )));
    }
    let (ga, gb) = (a.gray(), b.gray());
    let taps = gaussian_taps(p.window, p.sigma);
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&ga, h, w, &taps);
    let mu_b = filter_valid(&gb, h, w, &taps);
    let e_aa = filter_valid(&prod(&ga, &ga), h, w, &taps);
    let e_bb = filter_valid(&prod(&gb, &gb), h, w, &taps);
    let e_ab = filter_valid(&prod(&ga, &gb), h, w, &taps);
    let c1 = (0.01 * p.data_range).powi(2);
    let c2 = (0.03 * p.data_range).powi(2);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, SsimParams::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ColorCorrection {
    /// Per-channel least-squares gain `c = Σ p·g / Σ p²`.
    #[default]
    Gain,
    /// Per-channel additive shift `c = mean(g − p)`.
    Offset,
}

/// The corrected prediction before clamping, and the fitted color vector.
pub fn color_vector(pred: &ImageTensor, gt: &ImageTensor, mode: ColorCorrection) -> Result<[f64; 3]> {
    pred.ensure_same_shape(gt)?;
    if pred.channels() != 3 {
        return Err(Error::shape("color correction needs RGB images"));
    }
    let mut num = [0f64; 3];
    let mut den = [0f64; 3];
    for (px, gx) in pred.data().chunks_exact(3).zip(gt.data().chunks_exact(3)) {
        for c in 0..3 {
            let (p, g) = (px[c] as f64, gx[c] as f64);
            match mode {
                ColorCorrection::Gain => {
                    num[c] += p * g;
                    den[c] += p * p;
                }
                ColorCorrection::Offset => {
                    num[c] += g - p;
                    den[c] += 1.0;
                }
            }
        }
    }
    Ok(std::array::from_fn(|c| if den[c] == 0.0 { 0.0 } else { num[c] / den[c] }))
}

pub fn apply_color_vector(pred: &ImageTensor, v: [f64; 3], mode: ColorCorrection) -> Result<ImageTensor> {
    let (h, w, ch) = pred.dims();
    let data = pred
        .data()
        .iter()
        .enumerate()
        .map(|(i, &p)| match mode {
            ColorCorrection::Gain => (v[i % ch] * p as f64) as f32,
            ColorCorrection::Offset => (v[i % ch] + p as f64) as f32,
        })
        .collect();
    ImageTensor::from_unclamped(h, w, ch, data)
}

/// Fits one color vector to `pred` so it best matches `gt`, then applies it
/// and clamps into `[0, 1]`.
pub fn color_correct(pred: &ImageTensor, gt: &ImageTensor) -> Result<(ImageTensor, [f64; 3])> {
    color_correct_with(pred, gt, ColorCorrection::Gain)
}

pub fn color_correct_with(
    pred: &ImageTensor,
    gt: &ImageTensor,
    mode: ColorCorrection,
) -> Result<(ImageTensor, [f64; 3])> {
    let v = color_vector(pred, gt, mode)?;
    Ok((apply_color_vector(pred, v, mode)?, v))
}

/// RMSE of `gain ⊙ pred` against `gt` with no clamping.
pub fn gain_rmse_unclamped(pred: &ImageTensor, gt: &ImageTensor, gain: [f64; 3]) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    let n = pred.data().len() as f64;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .enumerate()
        .map(|(i, (&p, &g))| (gain[i % 3] * p as f64 - g as f64).powi(2))
        .sum();
    Ok((sse / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_hand_cases() {
        let a = ImageTensor::new(1, 2, 1, vec![0.0, 0.5]).unwrap();
        let b = ImageTensor::new(1, 2, 1, vec![0.5, 0.5]).unwrap();
        assert_eq!(rmse(&a, &b).unwrap(), 0.125f64.sqrt());
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let z = ImageTensor::constant(3, 3, 3, 0.0).unwrap();
        let o = ImageTensor::constant(3, 3, 3, 1.0).unwrap();
        assert_eq!(rmse(&z, &o).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images() {
        let z = ImageTensor::constant(16, 16, 3, 0.0).unwrap();
        let o = ImageTensor::constant(16, 16, 3, 1.0).unwrap();
        let c1 = 1e-4;
        assert!((ssim(&z, &o).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert_eq!(ssim(&o, &o).unwrap(), 1.0);
        assert!(ssim(&ImageTensor::constant(8, 8, 3, 0.0).unwrap(), &ImageTensor::constant(8, 8, 3, 0.0).unwrap()).is_err());
    }

    #[test]
    fn gain_recovers_scaled_prediction() {
        let gt = ImageTensor::from_fn(4, 4, 3, |y, x, c| (0.1 + 0.05 * (y + x + c) as f32).min(0.9)).unwrap();
        let pred = ImageTensor::from_fn(4, 4, 3, |y, x, c| 0.5 * gt.get(y, x, c)).unwrap();
        let (corr, v) = color_correct(&pred, &gt).unwrap();
        for c in v {
            assert!((c - 2.0).abs() < 1e-6);
        }
        assert!(rmse(&corr, &gt).unwrap() < 1e-6);
        let (same, v) = color_correct(&gt, &gt).unwrap();
        assert_eq!(v, [1.0; 3]);
        assert_eq!(same, gt);
    }

    #[test]
    fn zero_prediction_gets_zero_gain() {
        let z = ImageTensor::constant(2, 2, 3, 0.0).unwrap();
        let g = ImageTensor::constant(2, 2, 3, 0.5).unwrap();
        assert_eq!(color_vector(&z, &g, ColorCorrection::Gain).unwrap(), [0.0; 3]);
        let (_, off) = color_correct_with(&z, &g, ColorCorrection::Offset).unwrap();
        assert_eq!(off, [0.5; 3]);
    }
}
