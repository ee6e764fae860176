use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use soundloc::dictionary::dictionary_from_labels;
use soundloc::{Model, RunConfig};

fn soundloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soundloc"))
        .args(args)
        .env_remove("SOUNDLOC_SEED")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(dir: &Path, seed: &str) -> Output {
    soundloc(&[
        "gen-toy",
        "--out",
        s(dir),
        "--seed",
        seed,
        "--train-per-category",
        "5",
        "--test-per-category",
        "2",
        "--multi-train",
        "6",
        "--multi-test",
        "4",
    ])
}

/// Small dataset plus a briefly trained stage-one run.
fn trained(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    assert_eq!(code(&gen_small(&data, "1")), 0);
    let run = root.join("s1");
    let out = soundloc(&[
        "train-stage1",
        "--toy",
        "--manifest",
        s(&data.join("single_train.jsonl")),
        "--out",
        s(&run),
        "--alternations",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (data, run)
}

#[test]
fn gen_toy_is_deterministic_and_listed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&gen_small(&a, "7")), 0);
    assert_eq!(code(&gen_small(&b, "7")), 0);
    for name in ["single_train.jsonl", "single_test.jsonl", "multi_train.jsonl", "multi_test.jsonl"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert!(files.iter().any(|f| f == "multi_test.jsonl"));
    assert!(files.iter().all(|f| a.join(f.as_str().unwrap()).is_file()));

    // The environment seed stands in for --seed.
    let c = dir.path().join("c");
    let out = Command::new(env!("CARGO_BIN_EXE_soundloc"))
        .args(["gen-toy", "--out", s(&c), "--train-per-category", "5", "--test-per-category", "2"])
        .args(["--multi-train", "6", "--multi-test", "4"])
        .env("SOUNDLOC_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(a.join("multi_train.jsonl")).unwrap(), fs::read(c.join("multi_train.jsonl")).unwrap());
}

#[test]
fn gen_toy_rejects_bad_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("taken");
    fs::write(&file, "x").unwrap();
    let out = soundloc(&["gen-toy", "--out", s(&file)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&soundloc(&["no-such-command"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[stage1]\nlr = 0.001\nbogus = 1\n").unwrap();
    let out = soundloc(&["train-stage1", "--config", s(&cfg), "--manifest", "m.jsonl", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    let out = soundloc(&["train-stage1", "--manifest", s(&dir.path().join("missing.jsonl")), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_steps_leave_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen_small(&data, "2")), 0);
    let run = dir.path().join("s1");
    let out = soundloc(&[
        "train-stage1",
        "--toy",
        "--seed",
        "4",
        "--manifest",
        s(&data.join("single_train.jsonl")),
        "--out",
        s(&run),
        "--steps",
        "0",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let init = Model::new(RunConfig::toy().with_seed(4).model).unwrap();
    let saved = Model::load(run.join("stage1.ckpt")).unwrap();
    assert_eq!(saved.params, init.params);
    for name in ["dictionary.bin", "representations.bin", "train_log.jsonl", "config.json", "manifest.json"] {
        assert!(run.join(name).is_file(), "{name}");
    }
}

#[test]
fn training_log_and_stage_two() {
    let dir = tempfile::tempdir().unwrap();
    let (data, s1) = trained(dir.path());
    let log = fs::read_to_string(s1.join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    assert!(log.contains("pair_accuracy") && log.contains("classification"));

    let multi = data.join("multi_train.jsonl");
    let ckpt = s1.join("stage1.ckpt");
    let out = soundloc(&["train-stage2", "--manifest", s(&multi), "--stage1", s(&ckpt), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dict"));

    let s2 = dir.path().join("s2");
    let out = soundloc(&[
        "train-stage2",
        "--toy",
        "--manifest",
        s(&multi),
        "--stage1",
        s(&ckpt),
        "--dict",
        s(&s1.join("dictionary.bin")),
        "--out",
        s(&s2),
        "--steps",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(s2.join("train_log.jsonl")).unwrap().lines().count(), 2);
    assert!(Model::load(s2.join("stage2.ckpt")).is_ok());
}

#[test]
fn eval_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (data, s1) = trained(dir.path());
    let (ckpt, dict) = (s1.join("stage1.ckpt"), s1.join("dictionary.bin"));
    let run = |manifest: &Path, out: &Path| {
        soundloc(&["eval", "--toy", "--manifest", s(manifest), "--ckpt", s(&ckpt), "--dict", s(&dict), "--out", s(out)])
    };
    let (a, b) = (dir.path().join("ea"), dir.path().join("eb"));
    let out = run(&data.join("multi_test.jsonl"), &a);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&run(&data.join("multi_test.jsonl"), &b)), 0);
    let report = fs::read(a.join("report.json")).unwrap();
    assert_eq!(report, fs::read(b.join("report.json")).unwrap());
    let json: serde_json::Value = serde_json::from_slice(&report).unwrap();
    for key in ["ciou", "nsa", "sounding_map", "ciou_random"] {
        assert!(json["metrics"][key].is_number(), "{key}");
    }

    let out = run(&data.join("single_test.jsonl"), &dir.path().join("single"));
    assert_eq!(code(&out), 0);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("single/report.json")).unwrap()).unwrap();
    for key in ["iou", "auc", "nmi"] {
        assert!(json["metrics"][key].is_number(), "{key}");
    }

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&run(&empty, &dir.path().join("ee"))), 2);
}

#[test]
fn localize_writes_maps_overlays_and_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, s1) = trained(dir.path());
    let (ckpt, dict) = (s1.join("stage1.ckpt"), s1.join("dictionary.bin"));
    let (image, audio) = (data.join("frames/mix_test_0000.png"), data.join("audio/mix_test_0000.wav"));
    let out_dir = dir.path().join("loc");
    let out = soundloc(&[
        "localize", "--toy", "--image", s(&image), "--audio", s(&audio), "--ckpt", s(&ckpt), "--dict", s(&dict), "--out",
        s(&out_dir), "--boxes",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let k = RunConfig::toy().model.num_categories;
    for c in 0..k {
        assert!(out_dir.join(format!("heatmap_{c}.png")).is_file());
        assert!(out_dir.join(format!("overlay_{c}.png")).is_file());
    }
    assert!(out_dir.join("heatmaps.bin").is_file());
    let boxes: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("boxes.json")).unwrap()).unwrap();
    assert!(!boxes.as_array().unwrap().is_empty());

    // A dictionary whose keys have the wrong width.
    let cfg = RunConfig::toy();
    let c = cfg.model.channels + 1;
    let reps = ndarray::Array2::from_shape_fn((8, c), |(i, j)| (i * c + j) as f64);
    let ids: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
    let labels: Vec<usize> = (0..8).map(|i| i % cfg.model.clusters).collect();
    let bad = dictionary_from_labels(reps.view(), &ids, &labels, cfg.model.clusters, 0).unwrap();
    let bad_path = dir.path().join("bad.bin");
    bad.save(&bad_path).unwrap();
    let out = soundloc(&[
        "localize", "--toy", "--image", s(&image), "--audio", s(&audio), "--ckpt", s(&ckpt), "--dict", s(&bad_path),
        "--out", s(&dir.path().join("loc2")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_cocktail_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen_small(&data, "3")), 0);
    let out_dir = dir.path().join("mix");
    let out = soundloc(&[
        "synth-cocktail",
        "--manifest",
        s(&data.join("single_train.jsonl")),
        "--out",
        s(&out_dir),
        "--count",
        "5",
        "--seed",
        "9",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let records = soundloc::data::load_manifest(out_dir.join("cocktails.jsonl")).unwrap();
    assert_eq!(records.len(), 5);
    for r in &records {
        assert_eq!(r.objects.iter().filter(|o| o.sounding).count(), 2);
        assert_eq!(r.objects.len(), 4);
        assert!(out_dir.join(&r.audio).is_file() && out_dir.join(&r.frame).is_file());
    }
}
