//! The multi-reference relighting protocol.
//!
//! Per repeat and per scene: draw a source light uniformly, then `n_refs`
//! distinct other lights as targets. Every (source, target) pair is relit and
//! scored against the target image, raw and after a single color vector fit.
//! All draws come from the ChaCha8 stream `(seed, PROTOCOL_STREAM)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::diffusion::RelightPipeline;
use crate::evaluation::metrics::{color_correct_with, rmse, ssim, ColorCorrection};
use crate::image::ImageTensor;
use crate::rng;
use crate::train::PairedImages;
use crate::{Error, Result};

pub const PROTOCOL_STREAM: u64 = 0x6576616c;

/// One relighting request of the protocol.
#[derive(Debug, Clone)]
pub struct RelightJob<'a> {
    pub source: &'a ImageTensor,
    pub target: &'a ImageTensor,
    pub seed: u64,
}

/// Anything that maps a (source, target) pair to a relit image.
pub trait Relighter {
    fn name(&self) -> &str;
    fn relight_many(&self, jobs: &[RelightJob<'_>]) -> Result<Vec<ImageTensor>>;
}

/// Returns the source unchanged: the input-image baseline.
pub struct IdentityRelighter;

impl Relighter for IdentityRelighter {
    fn name(&self) -> &str {
        "Input Img"
    }

    fn relight_many(&self, jobs: &[RelightJob<'_>]) -> Result<Vec<ImageTensor>> {
        Ok(jobs.iter().map(|j| j.source.clone()).collect())
    }
}

/// Returns the ground truth, which for same-scene targets is the target.
pub struct OracleRelighter;

impl Relighter for OracleRelighter {
    fn name(&self) -> &str {
        "Oracle"
    }

    fn relight_many(&self, jobs: &[RelightJob<'_>]) -> Result<Vec<ImageTensor>> {
        Ok(jobs.iter().map(|j| j.target.clone()).collect())
    }
}

/// The trained pipeline, sampled in batches.
pub struct PipelineRelighter<'a> {
    pub pipeline: &'a RelightPipeline,
    pub steps: usize,
    pub batch: usize,
}

impl Relighter for PipelineRelighter<'_> {
    fn name(&self) -> &str {
        "LumiNet"
    }

    fn relight_many(&self, jobs: &[RelightJob<'_>]) -> Result<Vec<ImageTensor>> {
        let mut out = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(self.batch.max(1)) {
            let sources: Vec<ImageTensor> = chunk.iter().map(|j| j.source.clone()).collect();
            let targets: Vec<ImageTensor> = chunk.iter().map(|j| j.target.clone()).collect();
            let seeds: Vec<u64> = chunk.iter().map(|j| j.seed).collect();
            out.extend(self.pipeline.relight_batch(&sources, &targets, &seeds, self.steps)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n_refs: usize,
    pub repeats: usize,
    pub seed: u64,
    pub correction: ColorCorrection,
}

impl ProtocolConfig {
    pub fn new(n_refs: usize, repeats: usize, seed: u64) -> Self {
        Self {
            n_refs,
            repeats,
            seed,
            correction: ColorCorrection::Gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub repeat: usize,
    pub scene: String,
    pub src_light: u32,
    pub tgt_light: u32,
    pub rmse_raw: f64,
    pub ssim_raw: f64,
    pub rmse_cc: f64,
    pub ssim_cc: f64,
    pub color_vector: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub rmse_raw: f64,
    pub ssim_raw: f64,
    pub rmse_cc: f64,
    pub ssim_cc: f64,
}

impl Aggregates {
    pub fn of(records: &[EvalRecord]) -> Aggregates {
        let n = records.len().max(1) as f64;
        let m = |f: fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Aggregates {
            rmse_raw: m(|r| r.rmse_raw),
            ssim_raw: m(|r| r.ssim_raw),
            rmse_cc: m(|r| r.rmse_cc),
            ssim_cc: m(|r| r.ssim_cc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub protocol: ProtocolConfig,
    pub records: Vec<EvalRecord>,
    /// Mean over every record (equal-size repeats, so also the mean of the
    /// per-repeat means).
    pub aggregates: Aggregates,
    pub per_repeat: Vec<Aggregates>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn aggregates_csv(&self) -> String {
        let a = &self.aggregates;
        format!(
            "method,rmse_raw,ssim_raw,rmse_cc,ssim_cc\n{},{},{},{},{}\n",
            self.method, a.rmse_raw, a.ssim_raw, a.rmse_cc, a.ssim_cc
        )
    }

    /// Raw and color-corrected RMSE/SSIM side by side.
    pub fn summary_table(&self) -> String {
        summary_table(std::slice::from_ref(self))
    }
}

pub fn summary_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{:width$} | {:^15} | {:^16}", "", "Raw", "Color Correction");
    let _ = writeln!(s, "{:width$} | {:>7} {:>7} | {:>7} {:>8}", "Method", "RMSE↓", "SSIM↑", "RMSE↓", "SSIM↑");
    for r in reports {
        let a = &r.aggregates;
        let _ = writeln!(
            s,
            "{:width$} | {:>7.3} {:>7.3} | {:>7.3} {:>8.3}",
            r.method, a.rmse_raw, a.ssim_raw, a.rmse_cc, a.ssim_cc
        );
    }
    s
}

/// Runs the protocol over every scene of `data`.
pub fn eval_protocol(relighter: &dyn Relighter, data: &PairedImages, cfg: &ProtocolConfig) -> Result<EvalReport> {
    if cfg.n_refs == 0 || cfg.repeats == 0 {
        return Err(Error::invalid("n_refs and repeats must be positive"));
    }
    if let Some(s) = data.scenes.iter().find(|s| s.lights.len() < cfg.n_refs + 1) {
        return Err(Error::data(format!(
            "scene {} has {} lighting conditions; the protocol needs {}",
            s.scene,
            s.lights.len(),
            cfg.n_refs + 1
        )));
    }
    let mut rng = rng::stream(cfg.seed, PROTOCOL_STREAM);
    let mut records = Vec::new();
    let mut per_repeat = Vec::with_capacity(cfg.repeats);
    for repeat in 0..cfg.repeats {
        let mut picks = Vec::new();
        for (si, s) in data.scenes.iter().enumerate() {
            let n = s.lights.len();
            let src = rng.random_range(0..n);
            let mut others: Vec<usize> = (0..n).filter(|&i| i != src).collect();
            let (chosen, _) = others.partial_shuffle(&mut rng, cfg.n_refs);
            for &tgt in chosen.iter() {
                picks.push((si, src, tgt, rng.next_u64()));
            }
        }
        let jobs: Vec<RelightJob<'_>> = picks
            .iter()
            .map(|&(si, a, b, seed)| RelightJob {
                source: &data.scenes[si].lights[a].1,
                target: &data.scenes[si].lights[b].1,
                seed,
            })
            .collect();
        let outputs = relighter.relight_many(&jobs)?;
        if outputs.len() != jobs.len() {
            return Err(Error::data("relighter returned the wrong number of images"));
        }
        let start = records.len();
        for ((&(si, a, b, _), job), out) in picks.iter().zip(&jobs).zip(&outputs) {
            let scene = &data.scenes[si];
            records.push(score(repeat, &scene.scene, scene.lights[a].0, scene.lights[b].0, out, job.target, cfg.correction)?);
        }
        per_repeat.push(Aggregates::of(&records[start..]));
    }
    Ok(EvalReport {
        method: relighter.name().to_string(),
        protocol: cfg.clone(),
        aggregates: Aggregates::of(&records),
        records,
        per_repeat,
    })
}

pub fn score(
    repeat: usize,
    scene: &str,
    src_light: u32,
    tgt_light: u32,
    pred: &ImageTensor,
    gt: &ImageTensor,
    correction: ColorCorrection,
) -> Result<EvalRecord> {
    let (cc, v) = color_correct_with(pred, gt, correction)?;
    Ok(EvalRecord {
        repeat,
        scene: scene.to_string(),
        src_light,
        tgt_light,
        rmse_raw: rmse(pred, gt)?,
        ssim_raw: ssim(pred, gt)?,
        rmse_cc: rmse(&cc, gt)?,
        ssim_cc: ssim(&cc, gt)?,
        color_vector: v,
    })
}
