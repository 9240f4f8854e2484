use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use luminet::train::read_loss_csv;
use luminet_cli::commands::{resolve_config, GlobalArgs};
use luminet_cli::manifest::RunManifest;
use proptest::prelude::*;
use serde_json::Value;

const TINY: &str = "\
intrinsics.c_int = 4
intrinsics.d_light = 3
intrinsics.widths = [4, 8, 8]
intrinsics.batch = 2
luminet.resolution = 16
luminet.base_channels = 8
luminet.channel_mults = [1, 2]
luminet.groups = 4
luminet.heads = 2
luminet.c_ctrl = 8
luminet.n_tok = 2
luminet.d_emb = 8
luminet.adaptor_widths = [6, 12, 12, 12, 16]
luminet.timesteps = 100
luminet.batch = 2
";

fn luminet(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_luminet"))
        .arg("--home")
        .arg(home)
        .args(args)
        .env_remove("LUMINET_HOME")
        .output()
        .expect("binary runs")
}

fn ok(home: &Path, args: &[&str]) -> String {
    let out = luminet(home, args);
    assert!(
        out.status.success(),
        "luminet {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(home: &Path, args: &[&str]) -> i32 {
    luminet(home, args).status.code().expect("exit code")
}

fn tiny_home() -> (tempfile::TempDir, String) {
    let home = tempfile::tempdir().unwrap();
    let cfg = home.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    (home, cfg.display().to_string())
}

fn manifests(home: &Path) -> Vec<RunManifest> {
    let mut paths: Vec<PathBuf> = fs::read_dir(home.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths
        .iter()
        .map(|p| serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap())
        .collect()
}

#[test]
fn datagen_writes_every_image_deterministically() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    let args = ["datagen", "--scenes", "3", "--lights", "2", "--size", "16", "--seed", "4"];
    ok(h, &[&args[..], &["--out", h.join("a").to_str().unwrap()]].concat());
    ok(h, &[&args[..], &["--out", h.join("b").to_str().unwrap()]].concat());
    let lines = fs::read_to_string(h.join("a/manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
    for line in lines.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        let rel = rec["path"].as_str().unwrap();
        assert_eq!(fs::read(h.join("a").join(rel)).unwrap(), fs::read(h.join("b").join(rel)).unwrap());
    }
    assert_eq!(lines, fs::read_to_string(h.join("b/manifest.jsonl")).unwrap());
}

#[test]
fn bad_arguments_exit_with_usage() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    assert_eq!(code(h, &["datagen", "--lights", "1", "--scenes", "2", "--size", "16"]), 2);
    assert_eq!(code(h, &["datagen", "--scenes", "2", "--size", "12"]), 2);
    assert_eq!(code(h, &["no-such-command"]), 2);
    assert_eq!(code(h, &["--set", "data.bogus=1", "datagen"]), 2);
    assert_eq!(code(h, &["config", "--set", "data.scenes=lots"]), 2);
}

#[test]
fn missing_inputs_map_to_data_and_checkpoint_codes() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    assert_eq!(code(h, &["train-intrinsics", "--steps", "1"]), 3);
    ok(h, &["datagen", "--scenes", "2", "--lights", "2", "--size", "16"]);
    assert_eq!(code(h, &["train-luminet", "--steps", "1"]), 4);
    let bad = h.join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(code(h, &["train-luminet", "--intrinsics", bad.to_str().unwrap()]), 4);
    assert_eq!(code(h, &["evaluate", "--model", "oracle"]), 2);
}

#[test]
fn identical_runs_are_flagged_as_reproductions_and_replay() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    let args = ["datagen", "--scenes", "2", "--lights", "2", "--size", "16"];
    let first = ok(h, &args);
    assert!(!first.contains("reproduces"));
    let second = ok(h, &args);
    assert!(second.contains("reproduces"), "{second}");
    let runs = manifests(h);
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0].config_hash, runs[1].config_hash);
    assert!(runs[0].wall_clock_secs >= 0.0);
    assert_eq!(runs[0].command, "datagen");
    assert_eq!(runs[0].config["data"]["scenes"], 2);

    let path = fs::read_dir(h.join("runs")).unwrap().next().unwrap().unwrap().path();
    let replay = ok(h, &["replay", path.to_str().unwrap()]);
    assert!(replay.contains("reproduces"), "{replay}");
}

#[test]
fn config_reference_lists_every_key() {
    let home = tempfile::tempdir().unwrap();
    let page = ok(home.path(), &["config", "--reference"]);
    for (k, _) in luminet_cli::config::KEY_DOCS {
        assert!(page.contains(&format!("`{k}`")), "{k} missing");
    }
    let shown: Value = serde_json::from_str(&ok(home.path(), &["config", "--set", "data.scenes=9"])).unwrap();
    assert_eq!(shown["data"]["scenes"], 9);
}

#[test]
fn full_size_datagen_and_twelve_reference_protocol() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    let out = ok(h, &["datagen", "--scenes", "200", "--lights", "7", "--seed", "1"]);
    assert!(out.contains("1400 images in 200 scenes"), "{out}");
    assert_eq!(fs::read_to_string(h.join("data/manifest.jsonl")).unwrap().lines().count(), 1400);

    let second = h.join("wide");
    ok(h, &["datagen", "--scenes", "2", "--lights", "13", "--size", "16", "--out", second.to_str().unwrap()]);
    let data = second.join("manifest.jsonl");
    let run = |name: &str| {
        let report = h.join(name);
        let args = ["evaluate", "--model", "identity", "--data", data.to_str().unwrap(), "--n-refs", "12", "--repeats", "3", "--seed", "7", "--out", report.to_str().unwrap()];
        ok(h, &args);
        fs::read(report).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn evaluate_baselines_and_oracle() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    ok(h, &["datagen", "--scenes", "3", "--lights", "3", "--size", "16"]);
    let table = ok(h, &["evaluate", "--model", "oracle", "--repeats", "2", "--n-refs", "2"]);
    assert!(table.contains("Oracle"), "{table}");
    let report: Value = serde_json::from_str(&fs::read_to_string(h.join("reports/oracle.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 3 * 2 * 2);
    assert_eq!(report["aggregates"]["rmse_raw"].as_f64().unwrap(), 0.0);
    ok(h, &["evaluate", "--model", "identity", "--repeats", "1", "--n-refs", "2"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(h.join("reports/identity.json")).unwrap()).unwrap();
    assert!(report["aggregates"]["rmse_raw"].as_f64().unwrap() > 0.0);
    assert_eq!(code(h, &["evaluate", "--model", "oracle", "--repeats", "1", "--n-refs", "3"]), 3);
}

#[test]
fn train_resume_relight_and_select() {
    let (home, cfg) = tiny_home();
    let h = home.path();
    let c = ["--config", cfg.as_str()];
    ok(h, &[&c[..], &["datagen", "--scenes", "3", "--lights", "3", "--size", "16"]].concat());

    ok(h, &[&c[..], &["train-intrinsics", "--steps", "50", "--save-every", "20"]].concat());
    let csv = h.join("checkpoints/intrinsics.intrinsics.loss.csv");
    let rows = read_loss_csv(&csv).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=50).collect::<Vec<u64>>());
    assert!(rows.iter().all(|r| r.loss.is_finite()));
    let out = ok(h, &[&c[..], &["train-intrinsics", "--steps", "60", "--resume"]].concat());
    assert!(out.contains("resuming intrinsics training at step 51"), "{out}");
    let rows = read_loss_csv(&csv).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=60).collect::<Vec<u64>>());

    ok(h, &[&c[..], &["train-luminet", "--base-steps", "4", "--steps", "3"]].concat());
    let base = read_loss_csv(&h.join("checkpoints/luminet.base.loss.csv")).unwrap();
    let fine = read_loss_csv(&h.join("checkpoints/luminet.luminet.loss.csv")).unwrap();
    assert_eq!((base.len(), fine.len()), (4, 3));
    ok(h, &[&c[..], &["train-luminet", "--base-steps", "4", "--steps", "5", "--resume"]].concat());
    let fine = read_loss_csv(&h.join("checkpoints/luminet.luminet.loss.csv")).unwrap();
    assert_eq!(fine.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);

    let src = h.join("data/images/scene_0000/light_00.png");
    let tgt = h.join("data/images/scene_0001/light_02.png");
    let (s, t) = (src.to_str().unwrap(), tgt.to_str().unwrap());
    let relight = |dir: &str, extra: &[&str]| {
        let d = h.join(dir);
        let args = [&c[..], &["relight", "--source", s, "--target", t, "--steps", "4", "--out", d.to_str().unwrap()], extra].concat();
        ok(h, &args);
        d
    };
    let a = relight("r1", &["--seed", "3", "--crop", "0,0,8,8"]);
    let b = relight("r2", &["--seed", "3"]);
    assert_eq!(fs::read(a.join("relit.png")).unwrap(), fs::read(b.join("relit.png")).unwrap());
    let sheet = luminet::ImageTensor::load(a.join("sheet.png")).unwrap();
    assert_eq!(sheet.dims(), (16 * 2 + 2, 16 * 3 + 2 * 2, 3));

    let d = h.join("defaults");
    ok(h, &[&c[..], &["relight", "--source", s, "--target", t, "--out", d.to_str().unwrap()]].concat());
    let mut made: Vec<String> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    made.sort();
    assert_eq!(made, ["relit.png", "sheet.png"]);
    let last = manifests(h).into_iter().filter(|m| m.command == "relight").last().unwrap();
    assert_eq!(last.config["relight"]["steps"], 50);

    let wide = relight("nn30", &["--nn-seeds", "30", "--nn-top", "4"]);
    let ranked: Vec<String> = fs::read_dir(&wide)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("relit_rank") && n.contains("_dist"))
        .collect();
    assert_eq!(ranked.len(), 4);

    let nn = relight("nn", &["--nn-seeds", "3", "--nn-top", "2", "--distance", "cosine"]);
    let mut names: Vec<String> = fs::read_dir(&nn)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("relit_rank"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 2);
    assert!(names[0].starts_with("relit_rank01_seed") && names[0].contains("_dist"), "{names:?}");

    let cands: Vec<String> = names.iter().map(|n| nn.join(n).display().to_string()).collect();
    let mut args = vec!["select", "--target", t, "--top", "2", "--distance", "cosine", "--candidates"];
    args.extend(cands.iter().map(String::as_str));
    let ranked = ok(h, &[&c[..], &args[..]].concat());
    assert!(ranked.contains(" 1. ") && ranked.contains(" 2. "), "{ranked}");

    assert_eq!(
        code(h, &[&c[..], &["--set", "luminet.resolution=32", "train-luminet", "--steps", "1"]].concat()),
        2
    );
    let table = ok(h, &[&c[..], &["evaluate", "--repeats", "1", "--n-refs", "1", "--steps", "2"]].concat());
    assert!(table.contains("LumiNet"), "{table}");
}

fn globals(config: Option<PathBuf>, sets: Vec<String>) -> GlobalArgs {
    GlobalArgs {
        home: PathBuf::from("unused"),
        config,
        sets,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// flag > --set > file > default, key by key.
    #[test]
    fn config_precedence(file in proptest::option::of(1usize..50), set in proptest::option::of(50usize..100), flag in proptest::option::of(100usize..150)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        let mut text = String::from("data.seed = 77\n");
        if let Some(v) = file {
            text.push_str(&format!("data.scenes = {v}\n"));
        }
        fs::write(&path, text).unwrap();
        let sets = set.map(|v| vec![format!("data.scenes={v}")]).unwrap_or_default();
        let cfg = resolve_config(&globals(Some(path), sets), &[("data.scenes", flag.map(Value::from))]).unwrap();
        let expect = flag.or(set).or(file).unwrap_or(200);
        prop_assert_eq!(cfg.data.scenes, expect);
        prop_assert_eq!(cfg.data.seed, 77);
        prop_assert_eq!(cfg.data.lights, 7);
    }
}
