//! Seed-0 pilot on the toy dataset. Writes the measured numbers that the
//! acceptance thresholds were pinned against to `results/toy_pilot.json`.
//!
//! cargo run --release -p soundloc-core --example toy_pilot [-- OUT]

use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;
use soundloc::data::{generate_toy_dataset, ToyConfig};
use soundloc::eval::{category_mass, representation_nmi, score_multi, summarize_multi, Report};
use soundloc::pipeline::partition_clips;
use soundloc::stage1::{evaluate_pairs, train_stage1};
use soundloc::stage2::{infer_clips, train_stage2};
use soundloc::{Model, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../results/toy_pilot.json"));
    let t = Instant::now();
    let dir = tempfile::tempdir()?;
    let summary = generate_toy_dataset(&ToyConfig::default(), dir.path())?;
    let cfg = RunConfig::toy().with_seed(0);
    let m = &summary.manifests;
    let (single_train, _) = partition_clips(cfg.load_manifest_clips(&m.single_train)?);
    let single_test = cfg.load_manifest_clips(&m.single_test)?;
    let multi_train = cfg.load_manifest_clips(&m.multi_train)?;
    let multi_test = cfg.load_manifest_clips(&m.multi_test)?;

    let s1 = train_stage1(Model::new(cfg.model.clone())?, &single_train, &cfg.stage1)?;
    let pairs = evaluate_pairs(&s1.model, &single_test, 0)?;
    let nmi = representation_nmi(&s1.model, &s1.dictionary, &single_test, 0.05)?;
    let s1_secs = t.elapsed().as_secs_f64();

    let s2 = train_stage2(s1.model.clone(), &multi_train, Some(&s1.dictionary), &cfg.stage2)?;
    let maps = infer_clips(&s2.model, &multi_test, &s1.dictionary, cfg.eval.use_prod)?;
    let mut report = Report::default();
    summarize_multi(&mut report, &score_multi(&multi_test, &maps, &s1.dictionary, &cfg.eval)?, &cfg.eval)?;

    // Mean visual category mass on sounding versus silent objects.
    let (mut sounding, mut silent) = (Vec::new(), Vec::new());
    for (clip, cm) in multi_test.iter().zip(&maps) {
        let mass = category_mass(cm, &s1.dictionary)?;
        for o in &clip.record.objects {
            if o.sounding { &mut sounding } else { &mut silent }.push(mass[o.category]);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;

    let record = json!({
        "seed": 0,
        "stage1": {
            "pair_accuracy": pairs.accuracy,
            "nmi": nmi,
            "seconds": s1_secs,
        },
        "stage2": {
            "metrics": report.metrics,
            "pv_mass_sounding": mean(&sounding),
            "pv_mass_silent": mean(&silent),
        },
        "seconds": t.elapsed().as_secs_f64(),
    });
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, serde_json::to_string_pretty(&record)? + "\n")?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}
