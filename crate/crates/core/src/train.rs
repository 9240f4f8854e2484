//! Shared training plumbing: in-memory paired image sets, learning-rate
//! schedules and the `step,loss,lr` loss log.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::DatasetManifest;
use crate::image::ImageTensor;
use crate::rng::Rng;
use crate::{Error, Result};

/// Every image of a manifest, decoded and grouped by scene.
#[derive(Debug, Clone)]
pub struct PairedImages {
    pub scenes: Vec<SceneImages>,
}

#[derive(Debug, Clone)]
pub struct SceneImages {
    pub scene: String,
    /// `(light id, image)` in ascending light id.
    pub lights: Vec<(u32, ImageTensor)>,
}

impl PairedImages {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut scenes = Vec::new();
        for g in manifest.groups() {
            let lights = g
                .records
                .iter()
                .map(|r| Ok((r.light, manifest.load_image(r)?)))
                .collect::<Result<Vec<_>>>()?;
            scenes.push(SceneImages { scene: g.scene, lights });
        }
        if scenes.is_empty() {
            return Err(Error::data("dataset is empty"));
        }
        let first = scenes[0].lights[0].1.dims();
        for s in &scenes {
            for (_, img) in &s.lights {
                if img.dims() != first {
                    return Err(Error::data(format!(
                        "scene {} has image dims {:?}, expected {first:?}",
                        s.scene,
                        img.dims()
                    )));
                }
            }
        }
        Ok(Self { scenes })
    }

    pub fn from_scenes(scenes: Vec<SceneImages>) -> Self {
        Self { scenes }
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        self.scenes[0].lights[0].1.dims()
    }

    pub fn num_images(&self) -> usize {
        self.scenes.iter().map(|s| s.lights.len()).sum()
    }

    pub fn ensure_paired(&self) -> Result<()> {
        if self.scenes.iter().any(|s| s.lights.len() >= 2) {
            Ok(())
        } else {
            Err(Error::data("dataset has no scene with two or more lighting conditions"))
        }
    }

    /// A same-scene pair with distinct lights, drawn uniformly over paired
    /// scenes and then over ordered light pairs.
    pub fn sample_pair(&self, rng: &mut Rng) -> Result<(&ImageTensor, &ImageTensor)> {
        let (s, a, b) = self.sample_pair_index(rng)?;
        let lights = &self.scenes[s].lights;
        Ok((&lights[a].1, &lights[b].1))
    }

    /// `(scene, light a, light b)` indices of a [`PairedImages::sample_pair`] draw.
    pub fn sample_pair_index(&self, rng: &mut Rng) -> Result<(usize, usize, usize)> {
        let paired: Vec<usize> = (0..self.scenes.len()).filter(|&i| self.scenes[i].lights.len() >= 2).collect();
        if paired.is_empty() {
            return Err(Error::data("dataset has no scene with two or more lighting conditions"));
        }
        let s = paired[rng.random_range(0..paired.len())];
        let n = self.scenes[s].lights.len();
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        Ok((s, a, b))
    }

    /// A pair that with probability `p_self` repeats one image (unpaired data
    /// treated as `L_o = L_t`).
    pub fn sample_pair_or_self(&self, rng: &mut Rng, p_self: f64) -> Result<(&ImageTensor, &ImageTensor)> {
        let (s, a, b) = self.sample_pair_or_self_index(rng, p_self)?;
        let lights = &self.scenes[s].lights;
        Ok((&lights[a].1, &lights[b].1))
    }

    pub fn sample_pair_or_self_index(&self, rng: &mut Rng, p_self: f64) -> Result<(usize, usize, usize)> {
        if p_self > 0.0 && rng.random_bool(p_self.min(1.0)) {
            let s = rng.random_range(0..self.scenes.len());
            let a = rng.random_range(0..self.scenes[s].lights.len());
            Ok((s, a, a))
        } else {
            self.sample_pair_index(rng)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to
    /// `final_fraction·lr` at the last step.
    Cosine { warmup: usize, final_fraction: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup, final_fraction } => {
                if step < warmup {
                    return base * (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1) as f64;
                let t = ((step - warmup) as f64 / span).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                base * (final_fraction + (1.0 - final_fraction) * cos)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    /// 1-based step number.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss,lr";

/// Appends rows to a loss CSV, writing the header if the file is new.
pub fn append_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let fresh = !path.exists();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{LOSS_CSV_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{},{},{}", r.step, r.loss, r.lr)?;
    }
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(Error::data(format!("{} is not a loss log", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(Error::data(format!("bad loss log line {l:?}")));
            }
            let bad = |e: &dyn std::fmt::Display| Error::data(format!("bad loss log line {l:?}: {e}"));
            Ok(LossRow {
                step: f[0].parse().map_err(|e| bad(&e))?,
                loss: f[1].parse().map_err(|e| bad(&e))?,
                lr: f[2].parse().map_err(|e| bad(&e))?,
            })
        })
        .collect()
}

/// Mean loss over the first and last `fraction` of a log.
pub fn head_tail_means(rows: &[LossRow], fraction: f64) -> Option<(f64, f64)> {
    let n = ((rows.len() as f64 * fraction).ceil() as usize).max(1);
    if rows.len() < 2 * n {
        return None;
    }
    let mean = |s: &[LossRow]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&rows[..n]), mean(&rows[rows.len() - n..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine {
            warmup: 10,
            final_fraction: 0.1,
        };
        assert!((s.lr_at(1.0, 0, 110) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(1.0, 10, 110) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(1.0, 110, 110) - 0.1).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.lr_at(0.5, 7, 9), 0.5);
    }

    #[test]
    fn loss_csv_round_trips_and_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let rows: Vec<LossRow> = (1..=3)
            .map(|i| LossRow {
                step: i,
                loss: 1.0 / i as f64,
                lr: 1e-4,
            })
            .collect();
        append_loss_csv(&p, &rows[..2]).unwrap();
        append_loss_csv(&p, &rows[2..]).unwrap();
        assert_eq!(read_loss_csv(&p).unwrap(), rows);
    }
}
