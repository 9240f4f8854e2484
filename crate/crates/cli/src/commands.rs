//! Argument parsing and the subcommand bodies.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use luminet::checkpoint::Checkpoint;
use luminet::datagen::{self, BrightnessEmbedder, DatasetManifest};
use luminet::diffusion::{self, EncodedPairs, LuminetModel, LuminetTrainer, RelightPipeline, RelightRequest, TrainStage};
use luminet::evaluation::{self, EvalReport, IdentityRelighter, OracleRelighter, PipelineRelighter, ProtocolConfig, Relighter};
use luminet::image::ImageTensor;
use luminet::intrinsics::{self, IntrinsicsModel, IntrinsicsTrainer};
use luminet::selection::{nn_select, rank_candidates, Candidate, CandidateSet};
use luminet::train::{append_loss_csv, read_loss_csv, LossRow, PairedImages};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::manifest::{self, RunRecorder};
use crate::sheet::{relight_sheet, Crop};
use crate::{CliError, CliResult};

pub const HOME_ENV: &str = "LUMINET_HOME";
pub const DEFAULT_HOME: &str = ".luminet";

#[derive(Debug, Parser)]
#[command(name = "luminet", version, about = "Latent-intrinsic lighting transfer on toy and captured scenes")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Root for data, checkpoints, reports and run manifests.
    #[arg(long, global = true, env = HOME_ENV, default_value = DEFAULT_HOME)]
    pub home: PathBuf,
    /// Config file: JSON, or one `key = value` per line.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable); beats the file, loses to flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a paired toy dataset, or index a multi-illumination capture.
    Datagen(DatagenArgs),
    /// Train the intrinsic/extrinsic autoencoder.
    TrainIntrinsics(TrainIntrinsicsArgs),
    /// Pretrain the denoiser, then train control, cross-attention and adaptor.
    TrainLuminet(TrainLuminetArgs),
    /// Relight a source image toward a target image's lighting.
    Relight(RelightArgs),
    /// Run the multi-reference relighting protocol on a dataset.
    Evaluate(EvaluateArgs),
    /// Rank existing relit images by lighting-code distance to a target.
    Select(SelectArgs),
    /// Print the config reference or the resolved config.
    Config(ConfigArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub lights: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Keep images whose best prompt similarity reaches this value.
    #[arg(long)]
    pub filter_threshold: Option<f64>,
    /// Index `ROOT/<scene>/dir_<k>.(jpg|png)` instead of rendering.
    #[arg(long, value_name = "ROOT")]
    pub miiw: Option<PathBuf>,
    /// Output directory (default: HOME/data).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainIntrinsicsArgs {
    /// Dataset manifest (default: HOME/data/manifest.jsonl).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Total step target.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path (default: HOME/checkpoints/intrinsics.ckpt).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint at `--out` if it exists.
    #[arg(long)]
    pub resume: bool,
    /// Save a checkpoint every N steps in addition to the end.
    #[arg(long, default_value_t = 500)]
    pub save_every: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainLuminetArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Intrinsics checkpoint (default: HOME/checkpoints/intrinsics.ckpt).
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    /// Total fine-tuning step target.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Total pretraining step target.
    #[arg(long)]
    pub base_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path (default: HOME/checkpoints/luminet.ckpt).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 500)]
    pub save_every: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ModelPaths {
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    #[arg(long)]
    pub luminet: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RelightArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Candidate seeds for nearest-neighbour selection; 0 disables it.
    #[arg(long)]
    pub nn_seeds: Option<usize>,
    #[arg(long)]
    pub nn_top: Option<usize>,
    /// Lighting code distance: l2 or cosine.
    #[arg(long)]
    pub distance: Option<String>,
    /// Crop rectangle `y,x,h,w` shown enlarged on the contact sheet (repeatable).
    #[arg(long = "crop")]
    pub crops: Vec<String>,
    /// Output directory (default: HOME/relight).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub models: ModelPaths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalModel {
    Luminet,
    /// Returns the source unchanged.
    Identity,
    /// Returns the ground-truth target (debugging).
    Oracle,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalModel::Luminet)]
    pub model: EvalModel,
    #[arg(long)]
    pub n_refs: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// gain or offset.
    #[arg(long)]
    pub correction: Option<String>,
    /// Report path (default: HOME/reports/<model>.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub models: ModelPaths,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub candidates: Vec<PathBuf>,
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long)]
    pub distance: Option<String>,
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Print the generated reference of every key and default.
    #[arg(long)]
    pub reference: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_from(argv: Vec<String>) -> CliResult<()> {
    let cli = Cli::try_parse_from(&argv).map_err(|e| {
        use clap::error::ErrorKind as K;
        match e.kind() {
            K::DisplayHelp | K::DisplayVersion => {
                print!("{e}");
                CliError {
                    code: crate::EXIT_OK,
                    message: String::new(),
                }
            }
            _ => CliError::usage(e.to_string().trim_end()),
        }
    })?;
    run(cli, argv.into_iter().skip(1).collect())
}

pub fn run(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    let g = cli.global.clone();
    match cli.command {
        Command::Datagen(a) => cmd_datagen(&g, &a, argv),
        Command::TrainIntrinsics(a) => cmd_train_intrinsics(&g, &a, argv),
        Command::TrainLuminet(a) => cmd_train_luminet(&g, &a, argv),
        Command::Relight(a) => cmd_relight(&g, &a, argv),
        Command::Evaluate(a) => cmd_evaluate(&g, &a, argv),
        Command::Select(a) => cmd_select(&g, &a, argv),
        Command::Config(a) => cmd_config(&g, &a),
        Command::Replay(a) => {
            let m = manifest::read_manifest(&a.manifest)?;
            let mut full = vec!["luminet".to_string()];
            full.extend(m.argv);
            run_from(full)
        }
    }
}

/// Defaults, then the config file, then `--set`, then command flags.
pub fn resolve_config(g: &GlobalArgs, flags: &[(&str, Option<Value>)]) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &g.config {
        cfg.load_file(p)?;
    }
    for s in &g.sets {
        let (k, v) = crate::config::parse_assignment(s)?;
        cfg.set(&k, v)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v.clone())?;
        }
    }
    Ok(cfg)
}

fn opt<T: serde::Serialize>(v: &Option<T>) -> Option<Value> {
    v.as_ref().map(|x| serde_json::to_value(x).expect("flag serializes"))
}

fn recorder(command: &str, argv: Vec<String>, cfg: &RunConfig) -> RunRecorder {
    RunRecorder::new(command, argv, cfg.hash(), cfg.to_value())
}

fn finish(rec: RunRecorder, home: &Path) -> CliResult<()> {
    let (path, m) = rec.finish(home)?;
    match &m.reproduces {
        Some(prev) => println!("run manifest: {} (reproduces {prev})", path.display()),
        None => println!("run manifest: {}", path.display()),
    }
    Ok(())
}

fn data_path(g: &GlobalArgs, p: &Option<PathBuf>) -> PathBuf {
    p.clone().unwrap_or_else(|| g.home.join("data").join(datagen::dataset::MANIFEST_FILE))
}

fn intrinsics_path(g: &GlobalArgs, p: &Option<PathBuf>) -> PathBuf {
    p.clone().unwrap_or_else(|| g.home.join("checkpoints").join("intrinsics.ckpt"))
}

fn luminet_path(g: &GlobalArgs, p: &Option<PathBuf>) -> PathBuf {
    p.clone().unwrap_or_else(|| g.home.join("checkpoints").join("luminet.ckpt"))
}

fn load_dataset(path: &Path) -> CliResult<(DatasetManifest, PairedImages)> {
    if !path.exists() {
        return Err(CliError::data(format!(
            "dataset manifest {} not found; run `luminet datagen` first",
            path.display()
        )));
    }
    let m = DatasetManifest::read(path)?;
    let images = PairedImages::load(&m)?;
    Ok((m, images))
}

fn load_checkpoint(path: &Path, what: &str) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::checkpoint(format!("{what} checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn load_intrinsics(path: &Path, rec: &mut RunRecorder) -> CliResult<IntrinsicsModel> {
    let ckpt = load_checkpoint(path, "intrinsics")?;
    let m = IntrinsicsModel::from_checkpoint(&ckpt, candle_core::DType::F32)?;
    rec.input(path)?;
    rec.checkpoint(path, intrinsics::CHECKPOINT_VERSION);
    Ok(m)
}

fn load_pipeline(g: &GlobalArgs, paths: &ModelPaths, rec: &mut RunRecorder) -> CliResult<RelightPipeline> {
    let intr = load_intrinsics(&intrinsics_path(g, &paths.intrinsics), rec)?;
    let lp = luminet_path(g, &paths.luminet);
    let ckpt = load_checkpoint(&lp, "luminet")?;
    let lum = LuminetModel::from_checkpoint(&ckpt, candle_core::DType::F32)?;
    rec.input(&lp)?;
    rec.checkpoint(&lp, diffusion::model::CHECKPOINT_VERSION);
    Ok(RelightPipeline::new(intr, lum)?)
}

fn load_image_for(path: &Path, resolution: usize) -> CliResult<ImageTensor> {
    let img = ImageTensor::load(path).map_err(|e| CliError::data(format!("cannot read image {}: {e}", path.display())))?;
    if img.height() == resolution && img.width() == resolution {
        return Ok(img);
    }
    log::warn!(
        "{} is {}x{}; resizing to the model's {resolution}x{resolution}",
        path.display(),
        img.height(),
        img.width()
    );
    Ok(img.resize_nearest(resolution, resolution)?)
}

// ---------------------------------------------------------------------------

pub fn cmd_datagen(g: &GlobalArgs, a: &DatagenArgs, argv: Vec<String>) -> CliResult<()> {
    let cfg = resolve_config(
        g,
        &[
            ("data.scenes", opt(&a.scenes)),
            ("data.lights", opt(&a.lights)),
            ("data.seed", opt(&a.seed)),
            ("data.size", opt(&a.size)),
            ("data.filter_threshold", opt(&a.filter_threshold)),
        ],
    )?;
    let d = &cfg.data;
    let out = a.out.clone().unwrap_or_else(|| g.home.join("data"));
    let mut rec = recorder("datagen", argv, &cfg);
    let mut manifest = match &a.miiw {
        Some(root) => {
            let mut m = datagen::ingest_miiw(root)?;
            rec.input_tree(root)?;
            let abs = fs::canonicalize(root)?;
            for r in &mut m.records {
                r.path = abs.join(&r.path).display().to_string();
            }
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            m.root = out.clone();
            m
        }
        None => {
            if d.lights < 2 {
                return Err(CliError::usage(format!("--lights must be at least 2, got {}", d.lights)));
            }
            if d.scenes == 0 {
                return Err(CliError::usage("--scenes must be positive"));
            }
            if d.size == 0 || d.size % intrinsics::DOWNSAMPLE != 0 {
                return Err(CliError::usage(format!("--size must be a positive multiple of {}", intrinsics::DOWNSAMPLE)));
            }
            datagen::build_paired_dataset(d.scenes, d.lights, d.seed, d.size, &out)?
        }
    };
    if let Some(t) = d.filter_threshold {
        let before = manifest.len();
        manifest = datagen::filter_by_similarity(&manifest, &BrightnessEmbedder, &datagen::filter::DEFAULT_PROMPTS, t)?;
        println!("filter kept {} of {before} images", manifest.len());
    }
    fs::create_dir_all(&out)?;
    let path = out.join(datagen::dataset::MANIFEST_FILE);
    manifest.write(&path)?;
    rec.output(&path);
    let groups = manifest.groups();
    println!("{} images in {} scenes -> {}", manifest.len(), groups.len(), path.display());
    finish(rec, &g.home)
}

// ---------------------------------------------------------------------------

fn save_with_state(ckpt: Checkpoint, training: Value, opt: &luminet::nn::AdamW, path: &Path) -> CliResult<()> {
    let mut ckpt = ckpt;
    ckpt.meta["training"] = training;
    ckpt.tensors.extend(opt.state_records()?);
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ckpt.save(path)?;
    Ok(())
}

fn training_meta<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> CliResult<T> {
    ckpt.meta
        .get("training")
        .and_then(|t| t.get(key))
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| CliError::checkpoint(format!("checkpoint has no resumable training state ({key})")))
}

/// Rows already logged, checked against the checkpoint's step.
fn existing_rows(csv: &Path, step: usize) -> CliResult<()> {
    if step == 0 {
        if csv.exists() {
            fs::remove_file(csv)?;
        }
        return Ok(());
    }
    let rows = if csv.exists() { read_loss_csv(csv)? } else { Vec::new() };
    if rows.len() > step {
        // Steps logged after the last save are replayed; drop them.
        let keep: Vec<LossRow> = rows.into_iter().take(step).collect();
        fs::remove_file(csv)?;
        append_loss_csv(csv, &keep)?;
    }
    Ok(())
}

fn csv_for(ckpt: &Path, stage: &str) -> PathBuf {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    ckpt.with_file_name(format!("{stem}.{stage}.loss.csv"))
}

pub fn cmd_train_intrinsics(g: &GlobalArgs, a: &TrainIntrinsicsArgs, argv: Vec<String>) -> CliResult<()> {
    let cfg = resolve_config(
        g,
        &[
            ("intrinsics.steps", opt(&a.steps)),
            ("intrinsics.lr", opt(&a.lr)),
            ("intrinsics.batch", opt(&a.batch)),
            ("intrinsics.seed", opt(&a.seed)),
        ],
    )?;
    let data_p = data_path(g, &a.data);
    let (_, data) = load_dataset(&data_p)?;
    data.ensure_paired()?;
    let mut rec = recorder("train-intrinsics", argv, &cfg);
    rec.input(&data_p)?;
    let out = intrinsics_path(g, &a.out);
    let csv = csv_for(&out, "intrinsics");
    let tcfg = cfg.intrinsics_train();
    let (model, start, opt_state) = if a.resume && out.exists() {
        let ckpt = Checkpoint::load(&out)?;
        let step: usize = training_meta(&ckpt, "step")?;
        let model = IntrinsicsModel::from_checkpoint(&ckpt, candle_core::DType::F32)?;
        if model.config() != &cfg.intrinsics_model() {
            return Err(CliError::checkpoint("checkpoint architecture differs from the resolved config"));
        }
        rec.checkpoint(&out, intrinsics::CHECKPOINT_VERSION);
        let state: Vec<_> = ckpt.tensors.into_iter().filter(|t| t.partition.is_none()).collect();
        println!("resuming intrinsics training at step {}", step + 1);
        (model, step, state)
    } else {
        (IntrinsicsModel::new(cfg.intrinsics_model(), candle_core::DType::F32)?, 0, Vec::new())
    };
    let (h, w, _) = data.image_dims();
    model.check_dims(h, w)?;
    existing_rows(&csv, start)?;
    let mut trainer = IntrinsicsTrainer::new(model, tcfg.clone())?;
    if start > 0 {
        trainer.optimizer_mut().load_state(&opt_state, start as u64)?;
        trainer.resume_at(start);
    }
    let save = |t: &IntrinsicsTrainer| -> CliResult<()> {
        save_with_state(t.model.to_checkpoint()?, json!({ "step": t.step_count() }), t.optimizer(), &out)
    };
    let mut pending = Vec::new();
    while trainer.step_count() < tcfg.steps {
        let row = trainer.train_step(&data)?;
        if row.step % 100 == 0 {
            log::info!("intrinsics step {} loss {:.5}", row.step, row.loss);
        }
        pending.push(row);
        if trainer.step_count() % a.save_every.max(1) == 0 || trainer.step_count() == tcfg.steps {
            append_loss_csv(&csv, &pending)?;
            pending.clear();
            save(&trainer)?;
        }
    }
    if start >= tcfg.steps {
        println!("checkpoint already at step {start} (target {})", tcfg.steps);
    }
    rec.checkpoint(&out, intrinsics::CHECKPOINT_VERSION);
    rec.output(&out);
    rec.output(&csv);
    println!("intrinsics checkpoint -> {} (step {})", out.display(), trainer.step_count());
    finish(rec, &g.home)
}

pub fn cmd_train_luminet(g: &GlobalArgs, a: &TrainLuminetArgs, argv: Vec<String>) -> CliResult<()> {
    let cfg = resolve_config(
        g,
        &[
            ("luminet.steps", opt(&a.steps)),
            ("luminet.base_steps", opt(&a.base_steps)),
            ("luminet.lr", opt(&a.lr)),
            ("luminet.batch", opt(&a.batch)),
            ("luminet.seed", opt(&a.seed)),
        ],
    )?;
    let data_p = data_path(g, &a.data);
    let (_, data) = load_dataset(&data_p)?;
    data.ensure_paired()?;
    let mut rec = recorder("train-luminet", argv, &cfg);
    rec.input(&data_p)?;
    let intr = load_intrinsics(&intrinsics_path(g, &a.intrinsics), &mut rec)?;
    let (h, w, _) = data.image_dims();
    if h != cfg.luminet.resolution || w != cfg.luminet.resolution {
        return Err(CliError::usage(format!(
            "dataset images are {h}x{w} but luminet.resolution is {}; set them to agree",
            cfg.luminet.resolution
        )));
    }
    let out = luminet_path(g, &a.out);
    let (mut model, mut base_done, mut fine_done, mut state) = if a.resume && out.exists() {
        let ckpt = Checkpoint::load(&out)?;
        let base_done: usize = training_meta(&ckpt, "base_step")?;
        let fine_done: usize = training_meta(&ckpt, "luminet_step")?;
        let model = LuminetModel::from_checkpoint(&ckpt, candle_core::DType::F32)?;
        if model.config() != &cfg.luminet_model() {
            return Err(CliError::checkpoint("checkpoint architecture differs from the resolved config"));
        }
        rec.checkpoint(&out, diffusion::model::CHECKPOINT_VERSION);
        let state: Vec<_> = ckpt.tensors.into_iter().filter(|t| t.partition.is_none()).collect();
        println!("resuming at pretraining step {base_done}, fine-tuning step {fine_done}");
        (model, base_done, fine_done, state)
    } else {
        (LuminetModel::new(cfg.luminet_model(), candle_core::DType::F32)?, 0, 0, Vec::new())
    };
    let encoded = EncodedPairs::new(data, &intr, candle_core::DType::F32)?;
    let stages = [
        (TrainStage::Base, cfg.base_train(), "base"),
        (TrainStage::Luminet, cfg.luminet_train(), "luminet"),
    ];
    for (stage, tcfg, name) in stages {
        let csv = csv_for(&out, name);
        let done = if stage == TrainStage::Base { base_done } else { fine_done };
        // Optimizer moments saved mid-stage belong to the stage in progress.
        let resume_state = done > 0 && done < tcfg.steps && (stage == TrainStage::Luminet || fine_done == 0);
        existing_rows(&csv, done)?;
        if done >= tcfg.steps {
            continue;
        }
        let mut trainer = LuminetTrainer::new(model, tcfg.clone(), stage)?;
        if resume_state {
            trainer.optimizer_mut().load_state(&state, done as u64)?;
        }
        trainer.resume_at(done);
        let mut pending = Vec::new();
        while trainer.step_count() < tcfg.steps {
            let row = trainer.train_step(&encoded)?;
            if row.step % 100 == 0 {
                log::info!("{name} step {} loss {:.5}", row.step, row.loss);
            }
            pending.push(row);
            let s = trainer.step_count();
            if s % a.save_every.max(1) == 0 || s == tcfg.steps {
                append_loss_csv(&csv, &pending)?;
                pending.clear();
                let (b, f) = if stage == TrainStage::Base { (s, 0) } else { (base_done, s) };
                save_with_state(
                    trainer.model.to_checkpoint()?,
                    json!({ "base_step": b, "luminet_step": f }),
                    trainer.optimizer(),
                    &out,
                )?;
            }
        }
        if stage == TrainStage::Base {
            base_done = trainer.step_count();
        } else {
            fine_done = trainer.step_count();
        }
        rec.output(&csv);
        model = trainer.into_model();
        state.clear();
    }
    if !out.exists() {
        let mut ckpt = model.to_checkpoint()?;
        ckpt.meta["training"] = json!({ "base_step": base_done, "luminet_step": fine_done });
        ckpt.save(&out)?;
    }
    rec.checkpoint(&out, diffusion::model::CHECKPOINT_VERSION);
    rec.output(&out);
    println!(
        "luminet checkpoint -> {} (pretraining step {base_done}, fine-tuning step {fine_done})",
        out.display()
    );
    finish(rec, &g.home)
}

// ---------------------------------------------------------------------------

pub fn cmd_relight(g: &GlobalArgs, a: &RelightArgs, argv: Vec<String>) -> CliResult<()> {
    let cfg = resolve_config(
        g,
        &[
            ("relight.seed", opt(&a.seed)),
            ("relight.steps", opt(&a.steps)),
            ("relight.nn_seeds", opt(&a.nn_seeds)),
            ("relight.nn_top", opt(&a.nn_top)),
            ("relight.distance", opt(&a.distance)),
        ],
    )?;
    let crops: Vec<Crop> = a.crops.iter().map(|c| c.parse()).collect::<CliResult<_>>()?;
    let r = &cfg.relight;
    let mut rec = recorder("relight", argv, &cfg);
    let pipe = load_pipeline(g, &a.models, &mut rec)?;
    let res = pipe.luminet.config().resolution;
    let source = load_image_for(&a.source, res)?;
    let target = load_image_for(&a.target, res)?;
    rec.input(&a.source)?;
    rec.input(&a.target)?;
    let out = a.out.clone().unwrap_or_else(|| g.home.join("relight"));
    fs::create_dir_all(&out)?;
    let mut req = RelightRequest::new(source.clone(), target.clone());
    req.seed = r.seed;
    req.steps = r.steps;
    let relit: Vec<ImageTensor> = if r.nn_seeds == 0 {
        let img = pipe.relight(&req)?;
        let p = out.join("relit.png");
        img.save_png(&p)?;
        rec.output(&p);
        println!("relit -> {}", p.display());
        vec![img]
    } else {
        let ranked = nn_select(&pipe, &req, r.nn_seeds, r.nn_top, r.distance)?;
        for (i, c) in ranked.iter().enumerate() {
            let p = out.join(format!("relit_rank{:02}_seed{:03}_dist{:.4}.png", i + 1, c.seed, c.distance));
            c.image.save_png(&p)?;
            rec.output(&p);
            println!("rank {:>2}: seed {:>3} distance {:.4} -> {}", i + 1, c.seed, c.distance, p.display());
        }
        ranked.into_iter().map(|c| c.image).collect()
    };
    let sheet = relight_sheet(&target, &source, &relit, &crops)?;
    let p = out.join("sheet.png");
    sheet.save_png(&p)?;
    rec.output(&p);
    println!("contact sheet [target | source | relit] -> {}", p.display());
    finish(rec, &g.home)
}

pub fn cmd_evaluate(g: &GlobalArgs, a: &EvaluateArgs, argv: Vec<String>) -> CliResult<()> {
    let cfg = resolve_config(
        g,
        &[
            ("evaluate.n_refs", opt(&a.n_refs)),
            ("evaluate.repeats", opt(&a.repeats)),
            ("evaluate.seed", opt(&a.seed)),
            ("evaluate.steps", opt(&a.steps)),
            ("evaluate.correction", opt(&a.correction)),
        ],
    )?;
    let e = &cfg.evaluate;
    let repeats = e
        .repeats
        .ok_or_else(|| CliError::usage("evaluate needs --repeats (or evaluate.repeats in the config)"))?;
    let data_p = data_path(g, &a.data);
    let (_, data) = load_dataset(&data_p)?;
    let mut rec = recorder("evaluate", argv, &cfg);
    rec.input(&data_p)?;
    let protocol = ProtocolConfig {
        n_refs: e.n_refs,
        repeats,
        seed: e.seed,
        correction: e.correction,
    };
    let pipe;
    let relighter: Box<dyn Relighter> = match a.model {
        EvalModel::Identity => Box::new(IdentityRelighter),
        EvalModel::Oracle => Box::new(OracleRelighter),
        EvalModel::Luminet => {
            pipe = load_pipeline(g, &a.models, &mut rec)?;
            let (h, w, _) = data.image_dims();
            let res = pipe.luminet.config().resolution;
            if h != res || w != res {
                return Err(CliError::data(format!("dataset images are {h}x{w}, the model works at {res}x{res}")));
            }
            Box::new(PipelineRelighter {
                pipeline: &pipe,
                steps: e.steps,
                batch: e.batch,
            })
        }
    };
    let report: EvalReport = evaluation::eval_protocol(relighter.as_ref(), &data, &protocol)?;
    let name = match a.model {
        EvalModel::Luminet => "luminet",
        EvalModel::Identity => "identity",
        EvalModel::Oracle => "oracle",
    };
    let out = a.out.clone().unwrap_or_else(|| g.home.join("reports").join(format!("{name}.json")));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    report.write_json(&out)?;
    rec.output(&out);
    print!("{}", report.summary_table());
    println!("report -> {}", out.display());
    finish(rec, &g.home)
}

pub fn cmd_select(g: &GlobalArgs, a: &SelectArgs, argv: Vec<String>) -> CliResult<()> {
    let cfg = resolve_config(g, &[("relight.nn_top", opt(&a.top)), ("relight.distance", opt(&a.distance))])?;
    let mut rec = recorder("select", argv, &cfg);
    let intr = load_intrinsics(&intrinsics_path(g, &a.intrinsics), &mut rec)?;
    let load = |p: &Path| -> CliResult<ImageTensor> {
        ImageTensor::load(p).map_err(|e| CliError::data(format!("cannot read image {}: {e}", p.display())))
    };
    let target = load(&a.target)?;
    rec.input(&a.target)?;
    let (_, target_code) = intr.encode(&target)?;
    let mut candidates = Vec::new();
    for (i, p) in a.candidates.iter().enumerate() {
        let img = load(p)?;
        rec.input(p)?;
        let (_, code) = intr.encode(&img)?;
        candidates.push(Candidate {
            seed: i as u64,
            image: img,
            code,
        });
    }
    let k = cfg.relight.nn_top.min(candidates.len());
    let ranked = rank_candidates(&CandidateSet { candidates, target_code }, k, cfg.relight.distance)?;
    for (rank, c) in ranked.iter().enumerate() {
        println!("{:>2}. {:.6}  {}", rank + 1, c.distance, a.candidates[c.seed as usize].display());
    }
    finish(rec, &g.home)
}

pub fn cmd_config(g: &GlobalArgs, a: &ConfigArgs) -> CliResult<()> {
    if a.reference {
        print!("{}", crate::config::reference_page());
        return Ok(());
    }
    let cfg = resolve_config(g, &[])?;
    println!("{}", serde_json::to_string_pretty(&cfg.to_value()).expect("config serializes"));
    Ok(())
}
