use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use serde::de::DeserializeOwned;
use serde_json::json;

use soundloc::archive::{Tensor, TensorArchive};
use soundloc::data::{
    generate_toy_dataset, load_clips, load_manifest, load_solo, synthesize_cocktails, write_manifest, write_png, ClipRecord,
    Split,
};
use soundloc::eval::category_mass;
use soundloc::metrics::{heatmap_to_box, resize_bilinear};
use soundloc::pipeline::{evaluate_clips, partition_clips};
use soundloc::stage1::{self, encode_clips, Schedule};
use soundloc::stage2::{self, clip_maps};
use soundloc::audio::LogMel;
use soundloc::{Model, ObjectDictionary, RunConfig, ToyConfig};

use crate::output::{require_file, runtime, usage, CmdResult, OutDir};
use crate::{EvalArgs, GenToyArgs, LocalizeArgs, RunArgs, SynthArgs, TrainStage1Args, TrainStage2Args};

fn read_config<T: DeserializeOwned>(path: &Path) -> CmdResult<T> {
    require_file(path, "config")?;
    let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn run_config(run: &RunArgs, seed: Option<u64>) -> CmdResult<RunConfig> {
    let cfg = match &run.config {
        Some(path) => read_config(path)?,
        None if run.toy => RunConfig::toy(),
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_model(path: &Path) -> CmdResult<Model> {
    require_file(path, "checkpoint")?;
    Ok(Model::load(path)?)
}

fn load_dict(path: &Path) -> CmdResult<ObjectDictionary> {
    require_file(path, "dictionary")?;
    Ok(ObjectDictionary::load(path)?)
}

fn media_files(records: &[ClipRecord]) -> impl Iterator<Item = PathBuf> + '_ {
    records.iter().flat_map(|r| [r.audio.clone(), r.frame.clone()])
}

pub fn gen_toy(a: GenToyArgs, seed: Option<u64>) -> CmdResult {
    let mut cfg: ToyConfig = match &a.config {
        Some(path) => read_config(path)?,
        None => ToyConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(train_per_category, test_per_category, multi_train, multi_test, missing_categories, noise_rate);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut out = OutDir::create(&a.out, "gen-toy")?;
    let summary = generate_toy_dataset(&cfg, out.root())?;
    let m = &summary.manifests;
    for path in [&m.single_train, &m.single_test, &m.multi_train, &m.multi_test] {
        let records = load_manifest(path)?;
        for f in media_files(&records) {
            out.file(f);
        }
        out.file(path.file_name().unwrap());
    }
    out.write_json("toy_config.json", &cfg)?;
    out.finish()?;
    println!(
        "{}",
        serde_json::to_string(&json!({ "counts": summary.counts, "noisy_clips": summary.noisy_clips })).unwrap()
    );
    Ok(())
}

pub fn train_stage1(a: TrainStage1Args, seed: Option<u64>) -> CmdResult {
    let mut cfg = run_config(&a.run, seed)?;
    if let Some(lr) = a.lr {
        cfg.stage1.lr = lr;
    }
    if let Some(n) = a.alternations {
        cfg.stage1.alternations = n;
    }
    if a.steps.is_some() {
        cfg.stage1.max_steps = a.steps;
    }
    if a.sequential {
        cfg.stage1.schedule = Schedule::Sequential;
    }
    cfg.validate()?;
    require_file(&a.manifest, "manifest")?;
    let (single, _) = partition_clips(cfg.load_manifest_clips(&a.manifest)?);
    if single.is_empty() {
        return Err(usage(format!("`{}` has no single-source clips", a.manifest.display())));
    }
    let mut out = OutDir::create(&a.out, "train-stage1")?;
    let model = Model::new(cfg.model.clone())?;
    let res = stage1::train_stage1(model, &single, &cfg.stage1)?;

    res.model.save(out.file("stage1.ckpt"))?;
    res.dictionary.save(out.file("dictionary.bin"))?;
    let mut reps = TensorArchive::new(json!({
        "kind": "representations",
        "clip_ids": res.dictionary.clip_ids,
        "pseudo_labels": res.dictionary.assignments,
    }));
    reps.insert("values", Tensor::F64(res.representations.clone().into_dyn()));
    reps.save(out.file("representations.bin"))?;
    out.write_jsonl("train_log.jsonl", &res.log)?;
    out.write_json("config.json", &cfg)?;
    out.finish()?;
    let steps = res.log.last().map_or(0, |e| e.step);
    println!("stage 1: {steps} steps, {} clips, inertia {:.4}", single.len(), res.dictionary.inertia);
    Ok(())
}

pub fn train_stage2(a: TrainStage2Args, seed: Option<u64>) -> CmdResult {
    let dict_path = a.dict.as_deref().ok_or_else(|| {
        usage("train-stage2 needs --dict: the object dictionary written by train-stage1 (dictionary.bin)")
    })?;
    let mut cfg = run_config(&a.run, seed)?;
    let model = load_model(&a.stage1)?;
    let dict = load_dict(dict_path)?;
    cfg.model = model.config.clone();
    if let Some(lr) = a.lr {
        cfg.stage2.lr = lr;
    }
    if let Some(e) = a.epochs {
        cfg.stage2.epochs = e;
    }
    if a.steps.is_some() {
        cfg.stage2.max_steps = a.steps;
    }
    let flags = &mut cfg.stage2.flags;
    flags.use_loc &= !a.no_loc;
    flags.use_prod &= !a.no_prod;
    flags.use_consistency &= !a.no_consistency;
    cfg.eval.use_prod = cfg.stage2.flags.use_prod;
    cfg.validate()?;
    require_file(&a.manifest, "manifest")?;
    let (_, multi) = partition_clips(cfg.load_manifest_clips(&a.manifest)?);
    if multi.is_empty() {
        return Err(usage(format!("`{}` has no multi-source clips", a.manifest.display())));
    }
    let mut out = OutDir::create(&a.out, "train-stage2")?;
    let res = stage2::train_stage2(model, &multi, Some(&dict), &cfg.stage2)?;
    res.model.save(out.file("stage2.ckpt"))?;
    out.write_jsonl("train_log.jsonl", &res.log)?;
    out.write_json("config.json", &cfg)?;
    out.finish()?;
    println!("stage 2: {} steps on {} clips", res.log.len(), multi.len());
    Ok(())
}

pub fn eval(a: EvalArgs, seed: Option<u64>) -> CmdResult {
    let mut cfg = run_config(&a.run, seed)?;
    let model = load_model(&a.ckpt)?;
    let dict = load_dict(&a.dict)?;
    cfg.model = model.config.clone();
    if a.no_prod {
        cfg.eval.use_prod = false;
    }
    cfg.validate()?;
    require_file(&a.manifest, "manifest")?;
    let clips = cfg.load_manifest_clips(&a.manifest)?;
    if clips.is_empty() {
        return Err(usage(format!("`{}` is empty: nothing to evaluate", a.manifest.display())));
    }
    let report = evaluate_clips(&model, &dict, clips, &cfg.eval)?;
    let mut out = OutDir::create(&a.out, "eval")?;
    out.write("report.json", report.to_json()?)?;
    out.finish()?;
    for (name, value) in &report.metrics {
        println!("{name}\t{value:.4}");
    }
    Ok(())
}

/// Frame tinted red in proportion to `heat` (values in `[0, 1]`).
fn overlay(frame: &Array3<f32>, heat: &ndarray::Array2<f32>) -> Array3<f32> {
    let mut img = frame.clone();
    for ((c, y, x), v) in img.indexed_iter_mut() {
        let a = 0.6 * heat[[y, x]];
        let tint = if c == 0 { 1.0 } else { 0.0 };
        *v = (1.0 - a) * *v + a * tint;
    }
    img
}

pub fn localize(a: LocalizeArgs, seed: Option<u64>) -> CmdResult {
    let mut cfg = run_config(&a.run, seed)?;
    let model = load_model(&a.ckpt)?;
    let dict = load_dict(&a.dict)?;
    if dict.dim() != model.config.channels || dict.k() != model.config.clusters {
        return Err(usage(format!(
            "dictionary is {}x{} but the checkpoint has K = {}, C = {}",
            dict.k(),
            dict.dim(),
            model.config.clusters,
            model.config.channels
        )));
    }
    cfg.model = model.config.clone();
    if a.no_prod {
        cfg.eval.use_prod = false;
    }
    cfg.validate()?;
    require_file(&a.image, "image")?;
    require_file(&a.audio, "audio")?;
    let record = ClipRecord {
        clip_id: "input".into(),
        audio: std::path::absolute(&a.audio).map_err(|e| runtime(e.to_string()))?,
        frame: std::path::absolute(&a.image).map_err(|e| runtime(e.to_string()))?,
        split: Split::Single,
        category: None,
        audio_category: None,
        objects: Vec::new(),
    };
    let mel = LogMel::new(cfg.mel)?;
    let clips = load_clips(&[record], Path::new(""), &mel, cfg.num_samples(), cfg.model.image_size)?;
    let (audio, visual) = encode_clips(&model, &clips)?;
    let maps = clip_maps(&model, audio.row(0), visual.index_axis(Axis(0), 0), &dict, cfg.eval.use_prod)?;
    let mass = category_mass(&maps, &dict)?;

    let mut out = OutDir::create(&a.out, "localize")?;
    let mut ar = TensorArchive::new(json!({
        "kind": "heatmaps",
        "category_mass": mass,
        "use_prod": cfg.eval.use_prod,
    }));
    ar.insert("class_maps", Tensor::F32(maps.class_maps.clone().into_dyn()));
    ar.insert("cluster_maps", Tensor::F32(maps.s.clone().into_dyn()));
    ar.insert("localization", Tensor::F32(maps.l.clone().into_dyn()));
    ar.save(out.file("heatmaps.bin"))?;

    let frame = &clips[0].frame;
    let (_, h, w) = frame.dim();
    let mut boxes = Vec::new();
    for (k, map) in maps.class_maps.axis_iter(Axis(0)).enumerate() {
        let up = resize_bilinear(map, h, w);
        let peak = up.iter().copied().fold(0.0f32, f32::max);
        let heat = if peak > 0.0 { up.mapv(|v| v / peak) } else { up.clone() };
        let gray = Array3::from_shape_fn((3, h, w), |(_, y, x)| heat[[y, x]]);
        write_png(out.file(format!("heatmap_{k}.png")), &gray)?;
        write_png(out.file(format!("overlay_{k}.png")), &overlay(frame, &heat))?;
        if let Ok(b) = heatmap_to_box(up.view(), cfg.eval.area_threshold, k) {
            boxes.push(json!({ "category": k, "bbox": b.coords(), "score": mass[k] }));
        }
    }
    if a.boxes {
        out.write_json("boxes.json", &boxes)?;
    }
    out.finish()?;
    println!("{} category maps written to {}", maps.class_maps.dim().0, a.out.display());
    Ok(())
}

pub fn synth_cocktail(a: SynthArgs, seed: Option<u64>) -> CmdResult {
    require_file(&a.manifest, "manifest")?;
    let records = load_manifest(&a.manifest)?;
    let root = a.manifest.parent().unwrap_or(Path::new("."));
    let solos = records
        .iter()
        .filter(|r| r.split == Split::Single && r.category.is_some())
        .map(|r| load_solo(r, root, a.sample_rate))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = OutDir::create(&a.out, "synth-cocktail")?;
    let mixes = synthesize_cocktails(&solos, a.count, seed.unwrap_or(0), &a.prefix, out.root())?;
    for f in media_files(&mixes) {
        out.file(f);
    }
    write_manifest(out.file("cocktails.jsonl"), &mixes)?;
    out.finish()?;
    println!("{} cocktails from {} single-source clips", mixes.len(), solos.len());
    Ok(())
}
