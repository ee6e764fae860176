//! Criterion benchmarks for the hot paths of training and evaluation.

use criterion::{BenchmarkId, Criterion};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use soundloc::audio::{AudioClip, LogMel};
use soundloc::dictionary::{fit_dictionary, KMeansOptions};
use soundloc::metrics::{nmi, nsa, sounding_map, BoundingBox, Detection, GroundTruth};
use soundloc::stage1::{deranged_pairs, loc_loss_with_grad};
use soundloc::{MelConfig, Model, RunConfig};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn encoders(c: &mut Criterion) {
    let cfg = RunConfig::toy();
    let model = Model::new(cfg.model.clone()).unwrap();
    let mut r = rng();
    let side = cfg.model.image_size;
    let mut group = c.benchmark_group("encoders");
    for batch in [1usize, 16] {
        let frames = Array4::from_shape_fn((batch, 3, side, side), |_| r.random_range(0.0f32..1.0));
        group.bench_with_input(BenchmarkId::new("visual_forward", batch), &frames, |b, f| {
            b.iter(|| model.visual_forward(f.view()).unwrap())
        });
        let specs = Array3::from_shape_fn((batch, cfg.model.audio_frames, cfg.model.audio_mels), |_| r.random_range(-6.0f32..0.0));
        group.bench_with_input(BenchmarkId::new("audio_forward", batch), &specs, |b, s| {
            b.iter(|| model.audio_forward(s.view()).unwrap())
        });
    }
    group.finish();
}

pub fn front_end(c: &mut Criterion) {
    let mel = LogMel::new(MelConfig::default()).unwrap();
    let samples: Vec<f32> = (0..16_000).map(|i| (i as f32 * 0.1731).sin() * 0.4).collect();
    let clip = AudioClip::new(samples, 16_000).unwrap();
    c.bench_function("log_mel_1s", |b| b.iter(|| mel.compute(&clip).unwrap()));
}

pub fn losses(c: &mut Criterion) {
    let mut r = rng();
    let (batch, ch, grid) = (16, 32, 8);
    let audio = Array2::from_shape_fn((batch, ch), |_| r.random_range(-1.0f32..1.0));
    let visual = Array4::from_shape_fn((batch, ch, grid, grid), |_| r.random_range(-1.0f32..1.0));
    let pairs = deranged_pairs(batch, &mut r);
    c.bench_function("loc_loss_with_grad_16x32x8x8", |b| {
        b.iter(|| loc_loss_with_grad(audio.view(), visual.view(), &pairs, 1.0, 0.0).unwrap())
    });
}

pub fn clustering(c: &mut Criterion) {
    let mut r = rng();
    let reps = Array2::from_shape_fn((400, 32), |_| r.random_range(-1.0f64..1.0));
    let ids: Vec<String> = (0..400).map(|i| format!("c{i}")).collect();
    let opts = KMeansOptions::default();
    c.bench_function("kmeans_400x32_k4", |b| b.iter(|| fit_dictionary(reps.view(), &ids, 4, 0, &opts).unwrap()));
}

fn random_box(r: &mut ChaCha8Rng, side: u32, category: usize) -> BoundingBox {
    let x0 = r.random_range(0..side - 8);
    let y0 = r.random_range(0..side - 8);
    BoundingBox::new(x0, y0, x0 + 8, y0 + 8, category, true).unwrap()
}

pub fn metrics(c: &mut Criterion) {
    let mut r = rng();
    let labels: Vec<usize> = (0..1000).map(|_| r.random_range(0..4)).collect();
    let clusters: Vec<usize> = (0..1000).map(|_| r.random_range(0..4)).collect();
    c.bench_function("nmi_1000", |b| b.iter(|| nmi(&clusters, &labels).unwrap()));

    let maps = Array3::from_shape_fn((4, 8, 8), |_| r.random_range(0.0f32..1.0));
    let sounding = [true, false, true, false];
    c.bench_function("nsa_4x8x8", |b| b.iter(|| nsa(maps.view(), &sounding, 0.05).unwrap()));

    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for sample in 0..100 {
        for category in 0..4 {
            gts.push(GroundTruth { sample, bbox: random_box(&mut r, 64, category) });
            dets.push(Detection { sample, bbox: random_box(&mut r, 64, category), score: r.random() });
        }
    }
    c.bench_function("sounding_map_400", |b| b.iter(|| sounding_map(&dets, &gts, 0.3).unwrap()));
}
