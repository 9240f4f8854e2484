//! Per-run records under `$LUMINET_HOME/runs/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name; replaying them with the recorded
    /// config repeats the run.
    pub argv: Vec<String>,
    pub config_hash: String,
    pub config: Value,
    /// SHA-256 of every input file, keyed by path.
    pub input_hashes: BTreeMap<String, String>,
    /// Format version of every checkpoint read or written, keyed by path.
    pub checkpoint_versions: BTreeMap<String, u32>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub outputs: Vec<String>,
    /// Earlier manifest with the same command, config and inputs.
    pub reproduces: Option<String>,
}

/// Collects a manifest while a command runs.
pub struct RunRecorder {
    manifest: RunManifest,
    start: Instant,
}

impl RunRecorder {
    pub fn new(command: &str, argv: Vec<String>, config_hash: String, config: Value) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                argv,
                config_hash,
                config,
                input_hashes: BTreeMap::new(),
                checkpoint_versions: BTreeMap::new(),
                started_unix,
                wall_clock_secs: 0.0,
                outputs: Vec::new(),
                reproduces: None,
            },
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let h = hash_file(path)?;
        self.manifest.input_hashes.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Hashes every file under `dir` (sorted, relative names).
    pub fn input_tree(&mut self, dir: &Path) -> CliResult<()> {
        let h = hash_tree(dir)?;
        self.manifest.input_hashes.insert(dir.display().to_string(), h);
        Ok(())
    }

    pub fn checkpoint(&mut self, path: &Path, version: u32) {
        self.manifest.checkpoint_versions.insert(path.display().to_string(), version);
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Stamps the wall clock, looks for an earlier identical run and writes
    /// the manifest atomically. Returns its path.
    pub fn finish(mut self, home: &Path) -> CliResult<(PathBuf, RunManifest)> {
        self.manifest.wall_clock_secs = self.start.elapsed().as_secs_f64();
        let dir = home.join(RUNS_DIR);
        fs::create_dir_all(&dir)?;
        self.manifest.reproduces = find_reproduction(&dir, &self.manifest)?;
        if let Some(prev) = &self.manifest.reproduces {
            log::info!("run reproduces {prev}");
        }
        let key = run_key(&self.manifest);
        let mut n = 0;
        let path = loop {
            let p = dir.join(format!("{}-{}-{n:03}.json", self.manifest.command, &key[..12]));
            if !p.exists() {
                break p;
            }
            n += 1;
        };
        let bytes = serde_json::to_vec_pretty(&self.manifest).map_err(|e| CliError::data(e))?;
        luminet::checkpoint::write_atomic(&path, &bytes)?;
        Ok((path, self.manifest))
    }
}

/// Identity of a run for reproduction detection.
pub fn run_key(m: &RunManifest) -> String {
    let mut h = Sha256::new();
    h.update(m.command.as_bytes());
    h.update([0]);
    h.update(m.config_hash.as_bytes());
    for (k, v) in &m.input_hashes {
        h.update([0]);
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v.as_bytes());
    }
    hex::encode(h.finalize())
}

fn find_reproduction(dir: &Path, m: &RunManifest) -> CliResult<Option<String>> {
    let key = run_key(m);
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    for p in names {
        let Ok(text) = fs::read_to_string(&p) else { continue };
        let Ok(prev) = serde_json::from_str::<RunManifest>(&text) else { continue };
        if run_key(&prev) == key {
            return Ok(Some(p.display().to_string()));
        }
    }
    Ok(None)
}

pub fn read_manifest(path: &Path) -> CliResult<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{} is not a run manifest: {e}", path.display())))
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn hash_tree(dir: &Path) -> CliResult<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(hash_file(&dir.join(&rel))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
