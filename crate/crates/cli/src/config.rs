//! Run configuration: one nested document covering every subcommand.
//!
//! Resolution order, lowest to highest: built-in defaults, a config file
//! (JSON, or flat `section.key = value` lines), then command-line flags.
//! Unknown keys are rejected at every layer.

use std::path::Path;

use luminet::conditioning::ConditioningConfig;
use luminet::diffusion::{DenoiserConfig, LuminetConfig, LuminetTrainConfig, ScheduleKind};
use luminet::evaluation::ColorCorrection;
use luminet::intrinsics::{IntrinsicsConfig, IntrinsicsTrainConfig};
use luminet::selection::CodeDistance;
use luminet::train::LrSchedule;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub intrinsics: IntrinsicsSection,
    pub luminet: LuminetSection,
    pub relight: RelightSection,
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub scenes: usize,
    pub lights: usize,
    pub seed: u64,
    pub size: usize,
    pub filter_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntrinsicsSection {
    pub c_int: usize,
    pub d_light: usize,
    pub widths: [usize; 3],
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LuminetSection {
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub heads: usize,
    pub c_ctrl: usize,
    pub n_tok: usize,
    pub d_emb: usize,
    pub adaptor_widths: [usize; 5],
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub seed: u64,
    pub base_steps: usize,
    pub base_lr: f64,
    pub base_p_self: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub p_self: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelightSection {
    pub steps: usize,
    pub seed: u64,
    pub nn_seeds: usize,
    pub nn_top: usize,
    pub distance: CodeDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub n_refs: usize,
    pub repeats: Option<usize>,
    pub seed: u64,
    pub correction: ColorCorrection,
    pub steps: usize,
    pub batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            intrinsics: IntrinsicsSection::default(),
            luminet: LuminetSection::default(),
            relight: RelightSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            scenes: 200,
            lights: 7,
            seed: 1,
            size: 64,
            filter_threshold: None,
        }
    }
}

impl Default for IntrinsicsSection {
    fn default() -> Self {
        let m = IntrinsicsConfig::default();
        let t = IntrinsicsTrainConfig::default();
        let (warmup, final_lr_fraction) = match t.schedule {
            LrSchedule::Cosine { warmup, final_fraction } => (warmup, final_fraction),
            LrSchedule::Constant => (0, 1.0),
        };
        Self {
            c_int: m.c_int,
            d_light: m.d_light,
            widths: m.widths,
            seed: m.seed,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            warmup,
            final_lr_fraction,
            weight_decay: t.weight_decay,
        }
    }
}

impl Default for LuminetSection {
    fn default() -> Self {
        let m = LuminetConfig::default();
        let t = LuminetTrainConfig::default();
        Self {
            resolution: m.resolution,
            base_channels: m.denoiser.base_channels,
            channel_mults: m.denoiser.channel_mults,
            groups: m.denoiser.groups,
            heads: m.denoiser.heads,
            c_ctrl: m.conditioning.c_ctrl,
            n_tok: m.conditioning.n_tok,
            d_emb: m.conditioning.d_emb,
            adaptor_widths: m.conditioning.adaptor_widths,
            schedule: m.schedule,
            timesteps: m.timesteps,
            seed: m.seed,
            base_steps: 2000,
            base_lr: 5e-4,
            base_p_self: 0.5,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            p_self: t.p_self,
        }
    }
}

impl Default for RelightSection {
    fn default() -> Self {
        Self {
            steps: luminet::diffusion::DEFAULT_SAMPLING_STEPS,
            seed: 0,
            nn_seeds: 0,
            nn_top: 4,
            distance: CodeDistance::L2,
        }
    }
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            n_refs: 12,
            repeats: None,
            seed: 0,
            correction: ColorCorrection::Gain,
            steps: luminet::diffusion::DEFAULT_SAMPLING_STEPS,
            batch: 16,
        }
    }
}

/// Every key with a one-line description; the reference page is generated
/// from this table and the defaults.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("data.scenes", "toy scenes to render"),
    ("data.lights", "lighting conditions per scene (at least 2)"),
    ("data.seed", "seed for scene and lighting draws"),
    ("data.size", "toy image side length in pixels (multiple of 8)"),
    ("data.filter_threshold", "keep images whose best prompt similarity reaches this value; null disables filtering"),
    ("intrinsics.c_int", "intrinsic map channels"),
    ("intrinsics.d_light", "lighting code dimension"),
    ("intrinsics.widths", "encoder widths after each stride-2 stage"),
    ("intrinsics.seed", "initialization and batch sampling seed"),
    ("intrinsics.steps", "training steps"),
    ("intrinsics.batch", "same-scene pairs per step"),
    ("intrinsics.lr", "peak learning rate"),
    ("intrinsics.warmup", "linear warmup steps before cosine decay"),
    ("intrinsics.final_lr_fraction", "learning rate at the last step as a fraction of the peak"),
    ("intrinsics.weight_decay", "decoupled weight decay"),
    ("luminet.resolution", "working resolution of the denoiser (multiple of 16)"),
    ("luminet.base_channels", "denoiser width at full resolution"),
    ("luminet.channel_mults", "width multiplier per resolution level"),
    ("luminet.groups", "group-norm groups"),
    ("luminet.heads", "attention heads"),
    ("luminet.c_ctrl", "condition volume channels"),
    ("luminet.n_tok", "lighting tokens in the cross-attention context"),
    ("luminet.d_emb", "lighting token width"),
    ("luminet.adaptor_widths", "adaptor MLP layer widths (5 entries)"),
    ("luminet.schedule", "noise schedule: cosine or linear"),
    ("luminet.timesteps", "diffusion steps T used in training"),
    ("luminet.seed", "initialization and batch sampling seed"),
    ("luminet.base_steps", "unconditioned denoiser pretraining steps"),
    ("luminet.base_lr", "pretraining learning rate"),
    ("luminet.base_p_self", "pretraining probability of a self-pair"),
    ("luminet.steps", "fine-tuning steps (control, cross-attention, adaptor)"),
    ("luminet.batch", "pairs per step"),
    ("luminet.lr", "fine-tuning learning rate"),
    ("luminet.weight_decay", "decoupled weight decay"),
    ("luminet.p_self", "fine-tuning probability of a self-pair"),
    ("relight.steps", "DDIM sampling steps"),
    ("relight.seed", "initial noise seed"),
    ("relight.nn_seeds", "candidate seeds for nearest-neighbour selection; 0 disables it"),
    ("relight.nn_top", "candidates kept by nearest-neighbour selection"),
    ("relight.distance", "lighting code distance: l2 or cosine"),
    ("evaluate.n_refs", "target lights per source image"),
    ("evaluate.repeats", "protocol repeats (required)"),
    ("evaluate.seed", "protocol sampling seed"),
    ("evaluate.correction", "color correction: gain or offset"),
    ("evaluate.steps", "DDIM sampling steps"),
    ("evaluate.batch", "relights per sampling batch"),
];

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        serde_json::from_value(v).map_err(|e| CliError::usage(format!("invalid config: {e}")))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Parses a JSON document or `key = value` lines (`#` starts a comment).
    pub fn parse_document(text: &str) -> Result<Vec<(String, Value)>, CliError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            let v: Value = serde_json::from_str(text).map_err(|e| CliError::usage(format!("config is not valid JSON: {e}")))?;
            let mut out = Vec::new();
            flatten("", &v, &mut out);
            return Ok(out);
        }
        text.lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(parse_assignment)
            .collect()
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in Self::parse_document(&text)? {
            self.set(&k, v)?;
        }
        Ok(())
    }

    /// Sets one dotted key, rejecting unknown keys and ill-typed values.
    pub fn set(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        if !KEY_DOCS.iter().any(|(k, _)| *k == key) {
            return Err(CliError::usage(format!("unknown config key {key:?}")));
        }
        let mut doc = self.to_value();
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| CliError::usage(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        *self = Self::from_value(doc).map_err(|e| CliError::usage(format!("{key}: {}", e.message)))?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        let mut v = self.to_value();
        for part in key.split('.') {
            v = v.get(part)?.clone();
        }
        Some(v)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(&self.to_value()).expect("config serializes")))
    }

    pub fn intrinsics_model(&self) -> IntrinsicsConfig {
        let s = &self.intrinsics;
        IntrinsicsConfig {
            c_int: s.c_int,
            d_light: s.d_light,
            widths: s.widths,
            seed: s.seed,
        }
    }

    pub fn intrinsics_train(&self) -> IntrinsicsTrainConfig {
        let s = &self.intrinsics;
        IntrinsicsTrainConfig {
            steps: s.steps,
            batch: s.batch,
            lr: s.lr,
            schedule: LrSchedule::Cosine {
                warmup: s.warmup,
                final_fraction: s.final_lr_fraction,
            },
            weight_decay: s.weight_decay,
            seed: s.seed,
        }
    }

    pub fn luminet_model(&self) -> LuminetConfig {
        let s = &self.luminet;
        LuminetConfig {
            resolution: s.resolution,
            denoiser: DenoiserConfig {
                image_channels: 3,
                base_channels: s.base_channels,
                channel_mults: s.channel_mults.clone(),
                groups: s.groups,
                heads: s.heads,
            },
            conditioning: ConditioningConfig {
                c_int: self.intrinsics.c_int,
                d_light: self.intrinsics.d_light,
                c_ctrl: s.c_ctrl,
                n_tok: s.n_tok,
                d_emb: s.d_emb,
                adaptor_widths: s.adaptor_widths,
            },
            schedule: s.schedule,
            timesteps: s.timesteps,
            seed: s.seed,
        }
    }

    pub fn base_train(&self) -> LuminetTrainConfig {
        let s = &self.luminet;
        LuminetTrainConfig {
            steps: s.base_steps,
            batch: s.batch,
            lr: s.base_lr,
            schedule: LrSchedule::Constant,
            weight_decay: s.weight_decay,
            p_self: s.base_p_self,
            seed: s.seed,
        }
    }

    pub fn luminet_train(&self) -> LuminetTrainConfig {
        let s = &self.luminet;
        LuminetTrainConfig {
            steps: s.steps,
            batch: s.batch,
            lr: s.lr,
            schedule: LrSchedule::Constant,
            weight_decay: s.weight_decay,
            p_self: s.p_self,
            seed: s.seed.wrapping_add(1),
        }
    }
}

/// `key=value` with the value read as JSON when it parses, else as a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("expected key=value, got {s:?}")))?;
    let v = v.trim();
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Every leaf key of the default config with its default value.
pub fn default_entries() -> Vec<(String, Value)> {
    let mut out = Vec::new();
    flatten("", &RunConfig::default().to_value(), &mut out);
    out
}

/// Markdown table of every key, its default and its meaning.
pub fn reference_page() -> String {
    let mut s = String::from(
        "# Configuration reference\n\n\
         Precedence: command-line flag, then `--set key=value`, then the `--config` file, then the default below.\n\
         Files are JSON or one `key = value` per line.\n\n\
         | key | default | description |\n|---|---|---|\n",
    );
    for (k, v) in default_entries() {
        let doc = KEY_DOCS.iter().find(|(d, _)| *d == k).map(|(_, d)| *d).unwrap_or("");
        s.push_str(&format!("| `{k}` | `{v}` | {doc} |\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_documented_and_every_doc_is_a_key() {
        let keys: Vec<String> = default_entries().into_iter().map(|(k, _)| k).collect();
        for k in &keys {
            assert!(KEY_DOCS.iter().any(|(d, _)| d == k), "undocumented key {k}");
        }
        assert_eq!(keys.len(), KEY_DOCS.len());
    }

    #[test]
    fn unknown_keys_and_bad_types_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("data.scene", Value::from(3)).is_err());
        assert!(c.set("data.scenes", Value::from("many")).is_err());
        assert!(RunConfig::from_value(serde_json::json!({"data": {"bogus": 1}})).is_err());
        c.set("luminet.schedule", Value::from("linear")).unwrap();
        assert_eq!(c.luminet.schedule, ScheduleKind::Linear);
    }

    #[test]
    fn flat_and_json_documents_agree() {
        let flat = RunConfig::parse_document("data.scenes = 5 # comment\nluminet.channel_mults=[1,2]\n").unwrap();
        let json = RunConfig::parse_document(r#"{"data": {"scenes": 5}, "luminet": {"channel_mults": [1, 2]}}"#).unwrap();
        let apply = |kv: Vec<(String, Value)>| {
            let mut c = RunConfig::default();
            for (k, v) in kv {
                c.set(&k, v).unwrap();
            }
            c
        };
        assert_eq!(apply(flat), apply(json));
    }
}
