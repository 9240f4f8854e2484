use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{render_toy, LightingParams, ToyScene};
use crate::image::ImageTensor;
use crate::rng;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One image in a dataset; serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub scene: String,
    pub light: u32,
    /// Relative to the manifest's root directory.
    pub path: String,
    pub params: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub warnings: Vec<String>,
}

/// All lighting variants of one scene, in ascending light id.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGroup {
    pub scene: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Self {
            root: root.into(),
            records,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Scene groups in scene-id order.
    pub fn groups(&self) -> Vec<SceneGroup> {
        let mut map: BTreeMap<&str, Vec<ManifestRecord>> = BTreeMap::new();
        for r in &self.records {
            map.entry(&r.scene).or_default().push(r.clone());
        }
        map.into_iter()
            .map(|(scene, mut records)| {
                records.sort_by_key(|r| r.light);
                SceneGroup {
                    scene: scene.to_string(),
                    records,
                }
            })
            .collect()
    }

    pub fn scene_ids(&self) -> Vec<String> {
        self.groups().into_iter().map(|g| g.scene).collect()
    }

    /// Keeps only the listed scenes, preserving record order.
    pub fn subset(&self, scenes: &[String]) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            records: self
                .records
                .iter()
                .filter(|r| scenes.contains(&r.scene))
                .cloned()
                .collect(),
            warnings: Vec::new(),
        }
    }

    /// Splits off the last `n_holdout` scenes (in scene-id order).
    pub fn split_holdout(&self, n_holdout: usize) -> Result<(DatasetManifest, DatasetManifest)> {
        let ids = self.scene_ids();
        if n_holdout >= ids.len() {
            return Err(Error::invalid(format!(
                "cannot hold out {n_holdout} of {} scenes",
                ids.len()
            )));
        }
        let (train, test) = ids.split_at(ids.len() - n_holdout);
        Ok((self.subset(train), self.subset(test)))
    }

    /// Errors unless at least one scene has two or more lighting conditions.
    pub fn ensure_paired(&self) -> Result<()> {
        if self.groups().iter().any(|g| g.records.len() >= 2) {
            Ok(())
        } else {
            Err(Error::data("dataset has no scene with two or more lighting conditions"))
        }
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn load_image(&self, record: &ManifestRecord) -> Result<ImageTensor> {
        ImageTensor::load(self.resolve(record))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        crate::checkpoint::write_atomic(path.as_ref(), &buf)
    }

    /// Reads a JSON-lines manifest; paths resolve against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        let path = path.as_ref();
        let file = fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open manifest {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?,
            );
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetManifest::new(root, records))
    }
}

/// The scene with index `index` of a toy dataset seeded by `seed`; each scene
/// draws from its own stream so any one can be regenerated in isolation.
pub fn toy_scene(seed: u64, index: usize, height: usize, width: usize) -> Result<(ToyScene, rng::Rng)> {
    let mut r = rng::stream(seed, index as u64);
    let scene = ToyScene::random(&mut r, height, width)?;
    Ok((scene, r))
}

/// Lighting conditions of toy scene `index`: light 0 has every lamp off, the
/// rest are random.
pub fn toy_lightings(scene: &ToyScene, r: &mut rng::Rng, k_lights: usize) -> Vec<LightingParams> {
    (0..k_lights)
        .map(|k| {
            let mut p = scene.random_lighting(r);
            if k == 0 {
                p.lamp_states.iter_mut().for_each(|s| *s = 0.0);
            }
            p
        })
        .collect()
}

pub fn toy_scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Renders `n_scenes × k_lights` toy images under `out_dir/images/` and writes
/// `out_dir/manifest.jsonl`.
pub fn build_paired_dataset(
    n_scenes: usize,
    k_lights: usize,
    seed: u64,
    size: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if n_scenes == 0 {
        return Err(Error::invalid("need at least one scene"));
    }
    if k_lights < 2 {
        return Err(Error::invalid(format!("need at least 2 lighting conditions per scene, got {k_lights}")));
    }
    let out_dir = out_dir.as_ref();
    let mut records = Vec::with_capacity(n_scenes * k_lights);
    for i in 0..n_scenes {
        let (scene, mut r) = toy_scene(seed, i, size, size)?;
        let id = toy_scene_id(i);
        let dir = out_dir.join("images").join(&id);
        fs::create_dir_all(&dir)?;
        for (k, params) in toy_lightings(&scene, &mut r, k_lights).into_iter().enumerate() {
            let rel = format!("images/{id}/light_{k:02}.png");
            render_toy(&scene, &params)?.save_png(out_dir.join(&rel))?;
            records.push(ManifestRecord {
                scene: id.clone(),
                light: k as u32,
                path: rel,
                params: Some(serde_json::to_value(&params)?),
            });
        }
    }
    let manifest = DatasetManifest::new(out_dir, records);
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MIIW_LIGHTS: u32 = 25;

/// Indexes a multi-illumination capture tree laid out as
/// `root/<scene>/dir_<k>.(jpg|png)`, `k ∈ 0..25`.
///
/// Scenes with missing conditions are still ingested; a warning naming the
/// missing ids is logged and recorded. Scenes with no images are skipped.
pub fn ingest_miiw(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(format!("no scene directories under {}", root.display())));
    }
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for dir in dirs {
        let scene = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut found = BTreeMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if let Some(k) = parse_miiw_name(name) {
                found.entry(k).or_insert_with(|| name.to_string());
            }
        }
        if found.is_empty() {
            let msg = format!("scene {scene}: no dir_<k> images, skipped");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let missing: Vec<u32> = (0..MIIW_LIGHTS).filter(|k| !found.contains_key(k)).collect();
        if !missing.is_empty() {
            let msg = format!("scene {scene}: missing lighting conditions {missing:?}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        for (k, name) in found {
            let rel = format!("{scene}/{name}");
            image::image_dimensions(root.join(&rel))
                .map_err(|e| Error::data(format!("unreadable image {rel}: {e}")))?;
            records.push(ManifestRecord {
                scene: scene.clone(),
                light: k,
                path: rel,
                params: None,
            });
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        records,
        warnings,
    })
}

fn parse_miiw_name(name: &str) -> Option<u32> {
    let (stem, ext) = name.rsplit_once('.')?;
    if !matches!(ext.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png") {
        return None;
    }
    let k: u32 = stem.strip_prefix("dir_")?.parse().ok()?;
    (k < MIIW_LIGHTS).then_some(k)
}

/// Writes a tiny multi-illumination fixture, used by tests and docs.
pub fn write_miiw_fixture(root: &Path, scenes: usize, lights: u32, size: usize) -> Result<()> {
    for s in 0..scenes {
        let dir = root.join(format!("room_{s:02}"));
        fs::create_dir_all(&dir)?;
        for k in 0..lights {
            let v = (k as f32 + 1.0) / (lights as f32 + 1.0);
            ImageTensor::constant(size, size, 3, v)?.save_png(dir.join(format!("dir_{k}.png")))?;
        }
    }
    Ok(())
}
