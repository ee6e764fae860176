use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use soundloc::eval::{clip_boxes, score_multi, summarize_multi};
use soundloc::metrics::nmi;
use soundloc::model::StageTag;
use soundloc::pipeline::partition_clips;
use soundloc::stage1::{train_stage1, SupervisionSource};
use soundloc::stage2::{train_stage2, ClipMaps};
use soundloc::{data::generate_toy_dataset, LoadedClip, Model, Report, RunConfig, ToyConfig};

fn tiny_toy(dir: &Path) -> (Vec<LoadedClip>, Vec<LoadedClip>) {
    let cfg = ToyConfig {
        train_per_category: 6,
        test_per_category: 2,
        multi_train: 8,
        multi_test: 4,
        ..Default::default()
    };
    let summary = generate_toy_dataset(&cfg, dir).unwrap();
    let run = RunConfig::toy();
    let single = run.load_manifest_clips(&summary.manifests.single_train).unwrap();
    let multi = run.load_manifest_clips(&summary.manifests.multi_train).unwrap();
    (single, multi)
}

#[test]
fn empty_schedule_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (single, _) = tiny_toy(dir.path());
    let mut cfg = RunConfig::toy();
    cfg.stage1.loc_epochs = 0;
    cfg.stage1.cls_epochs = 0;
    let init = Model::new(cfg.model.clone()).unwrap();
    let out = train_stage1(init.clone(), &single, &cfg.stage1).unwrap();
    assert_eq!(out.model.params, init.params);
    assert_eq!(out.model.stage, StageTag::Init);
    assert_eq!(out.dictionary.k(), cfg.model.clusters);

    let mut cfg = RunConfig::toy();
    cfg.stage1.max_steps = Some(0);
    let out = train_stage1(init.clone(), &single, &cfg.stage1).unwrap();
    assert_eq!(out.model.params, init.params);
    assert!(out.log.iter().all(|e| e.phase == soundloc::stage1::Phase::Clustering));
}

#[test]
fn step_cap_bounds_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let (single, _) = tiny_toy(dir.path());
    let mut cfg = RunConfig::toy();
    cfg.stage1.max_steps = Some(3);
    let out = train_stage1(Model::new(cfg.model.clone()).unwrap(), &single, &cfg.stage1).unwrap();
    let steps: Vec<usize> = out.log.iter().map(|e| e.step).collect();
    assert_eq!(*steps.last().unwrap(), 3);
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn object_label_supervision_recovers_categories() {
    let dir = tempfile::tempdir().unwrap();
    let (single, _) = tiny_toy(dir.path());
    let mut cfg = RunConfig::toy();
    cfg.stage1.supervision = SupervisionSource::OracleV;
    cfg.stage1.alternations = 1;
    cfg.stage1.loc_epochs = 1;
    let out = train_stage1(Model::new(cfg.model.clone()).unwrap(), &single, &cfg.stage1).unwrap();
    let labels: Vec<usize> = single.iter().map(|c| c.record.category.unwrap()).collect();
    assert_eq!(nmi(&out.dictionary.assignments, &labels).unwrap(), 1.0);
}

#[test]
fn stage2_without_steps_returns_stage1_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (single, multi) = tiny_toy(dir.path());
    let mut cfg = RunConfig::toy();
    cfg.stage1.alternations = 1;
    let s1 = train_stage1(Model::new(cfg.model.clone()).unwrap(), &single, &cfg.stage1).unwrap();
    let keys = s1.dictionary.keys.clone();

    cfg.stage2.max_steps = Some(0);
    let out = train_stage2(s1.model.clone(), &multi, Some(&s1.dictionary), &cfg.stage2).unwrap();
    assert_eq!(out.model.params, s1.model.params);
    assert!(out.log.is_empty());

    cfg.stage2.max_steps = Some(2);
    let out = train_stage2(s1.model.clone(), &multi, Some(&s1.dictionary), &cfg.stage2).unwrap();
    assert_ne!(out.model.params, s1.model.params);
    assert_eq!(out.model.stage, StageTag::Stage2);
    assert_eq!(s1.dictionary.keys, keys);

    assert!(train_stage2(s1.model.clone(), &multi, None, &cfg.stage2).is_err());
}

/// Maps that put each category's mass exactly inside its box when sounding.
fn perfect_maps(clip: &LoadedClip, categories: usize) -> ClipMaps {
    let (_, h, w) = clip.frame.dim();
    let mut category_s = Array3::<f32>::zeros((categories, h, w));
    let mut class_maps = Array3::<f32>::zeros((categories, h, w));
    for b in clip_boxes(clip).unwrap() {
        let mask = b.mask(h, w);
        for ((y, x), &m) in mask.indexed_iter() {
            if m {
                class_maps[[b.category, y, x]] = 1.0;
                if b.sounding {
                    category_s[[b.category, y, x]] = 1.0;
                }
            }
        }
    }
    let pv = category_s.sum_axis(Axis(2)).sum_axis(Axis(1));
    let total = pv.sum();
    ClipMaps {
        s: category_s.clone(),
        class_maps,
        category_s,
        l: Array2::ones((h, w)),
        pv: pv.mapv(|v| v / total),
    }
}

#[test]
fn injected_perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let (single, multi) = tiny_toy(dir.path());
    let (single, _) = partition_clips(single);
    let cfg = RunConfig::toy();
    let mut s1cfg = cfg.stage1.clone();
    s1cfg.max_steps = Some(0);
    let mut dict = train_stage1(Model::new(cfg.model.clone()).unwrap(), &single, &s1cfg).unwrap().dictionary;
    // One cluster per category keeps the visual mass aligned with categories.
    dict.categories = Some(soundloc::CategoryAssignment {
        map: (0..cfg.model.clusters).collect(),
        purity: cfg.model.clusters as f64,
        num_categories: cfg.model.num_categories,
    });
    let maps: Vec<ClipMaps> = multi.iter().map(|c| perfect_maps(c, cfg.model.num_categories)).collect();
    let eval = score_multi(&multi, &maps, &dict, &cfg.eval).unwrap();
    let mut report = Report::default();
    summarize_multi(&mut report, &eval, &cfg.eval).unwrap();
    assert_eq!(report.metrics["ciou"], 1.0);
    assert_eq!(report.metrics["ciou_mean"], 1.0);
    assert_eq!(report.metrics["nsa"], 1.0);
    assert_eq!(report.metrics["sounding_map"], 1.0);
}
