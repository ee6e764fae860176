//! Clip manifests, cocktail-party scene synthesis and the procedural toy
//! audiovisual dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, write_wav_pcm16, AudioClip, LogMel};
use crate::error::{invalid, Error, Result};
use crate::metrics::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Single,
    Multi,
}

/// One visible object in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectAnnotation {
    pub category: usize,
    /// `[x0, y0, x1, y1]`, inclusive-exclusive pixels.
    pub bbox: [u32; 4],
    pub sounding: bool,
}

impl ObjectAnnotation {
    pub fn to_box(&self) -> Result<BoundingBox> {
        let [x0, y0, x1, y1] = self.bbox;
        BoundingBox::new(x0, y0, x1, y1, self.category, self.sounding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub audio: PathBuf,
    pub frame: PathBuf,
    pub split: Split,
    /// Object category of a single-source clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<usize>,
    /// Category of the sound, when it differs from the visible object.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_category: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<ObjectAnnotation>,
}

impl ClipRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.clip_id.is_empty() {
            return Err("empty clip_id".into());
        }
        for o in &self.objects {
            let [x0, y0, x1, y1] = o.bbox;
            if x0 >= x1 || y0 >= y1 {
                return Err(format!("degenerate box {:?}", o.bbox));
            }
        }
        match self.split {
            Split::Single => {
                let Some(c) = self.category else {
                    return Err("single-source record needs a category".into());
                };
                if self.objects.len() > 1 {
                    return Err("single-source record lists more than one object".into());
                }
                if self.objects.iter().any(|o| o.category != c || !o.sounding) {
                    return Err("single-source object must be the sounding record category".into());
                }
            }
            Split::Multi => {
                if self.category.is_some() {
                    return Err("multi-source record cannot carry a single category".into());
                }
                if self.objects.len() < 2 {
                    return Err("multi-source record needs at least two objects".into());
                }
                let cats: BTreeSet<usize> = self.objects.iter().map(|o| o.category).collect();
                if cats.len() != self.objects.len() {
                    return Err("multi-source objects must have distinct categories".into());
                }
                if !self.objects.iter().any(|o| o.sounding) {
                    return Err("multi-source record has no sounding object".into());
                }
            }
        }
        Ok(())
    }

    /// Label the audio carries; falls back to the visual category.
    pub fn sound_label(&self) -> Option<usize> {
        self.audio_category.or(self.category)
    }

    pub fn audio_path(&self, root: &Path) -> PathBuf {
        root.join(&self.audio)
    }

    pub fn frame_path(&self, root: &Path) -> PathBuf {
        root.join(&self.frame)
    }
}

/// Reads a JSONL manifest. Blank lines are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ClipRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut records = Vec::new();
    let mut seen: BTreeMap<String, (Split, usize)> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let rec: ClipRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        rec.validate().map_err(bad)?;
        if let Some(&(split, first)) = seen.get(&rec.clip_id) {
            if split != rec.split {
                return Err(Error::Partition(rec.clip_id));
            }
            return Err(bad(format!("clip `{}` already listed on line {first}", rec.clip_id)));
        }
        seen.insert(rec.clip_id.clone(), (rec.split, line_no));
        records.push(rec);
    }
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ClipRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Fails if any clip id occurs under both splits across the given sets.
pub fn check_partition<'a>(sets: impl IntoIterator<Item = &'a [ClipRecord]>) -> Result<()> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for set in sets {
        for r in set {
            match seen.insert(&r.clip_id, r.split) {
                Some(prev) if prev != r.split => return Err(Error::Partition(r.clip_id.clone())),
                _ => {}
            }
        }
    }
    Ok(())
}

/// RGB frame as `3 x H x W` in [0, 1].
pub fn read_png(path: impl AsRef<Path>) -> Result<Array3<f32>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

pub fn write_png(path: impl AsRef<Path>, pixels: &Array3<f32>) -> Result<()> {
    let (_, h, w) = pixels.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (pixels[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    img.save(path.as_ref())?;
    Ok(())
}

/// Area-average resize for integer downscale factors, bilinear otherwise.
pub fn resize_frame(pixels: &Array3<f32>, side: usize) -> Array3<f32> {
    let (c, h, w) = pixels.dim();
    if h == side && w == side {
        return pixels.clone();
    }
    if h % side == 0 && w % side == 0 {
        let (fy, fx) = (h / side, w / side);
        let norm = (fy * fx) as f32;
        return Array3::from_shape_fn((c, side, side), |(ch, y, x)| {
            pixels.slice(s![ch, y * fy..(y + 1) * fy, x * fx..(x + 1) * fx]).sum() / norm
        });
    }
    let mut out = Array3::zeros((c, side, side));
    for ch in 0..c {
        let r = crate::metrics::resize_bilinear(pixels.index_axis(Axis(0), ch), side, side);
        out.index_axis_mut(Axis(0), ch).assign(&r);
    }
    out
}

/// A clip decoded into model-ready tensors.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub record: ClipRecord,
    /// `T x M` log-mel.
    pub spec: Array2<f32>,
    /// `3 x S x S`.
    pub frame: Array3<f32>,
    /// `(height, width)` of the stored frame, the grid of the annotations.
    pub source_size: (usize, usize),
}

/// Decodes the media of `records`, fitting audio to `num_samples` at the
/// front end's rate and frames to `side`.
pub fn load_clips(records: &[ClipRecord], root: &Path, mel: &LogMel, num_samples: usize, side: usize) -> Result<Vec<LoadedClip>> {
    let rate = mel.config().sample_rate;
    records
        .iter()
        .map(|r| {
            let clip = read_wav(r.audio_path(root))?;
            let clip = if clip.sample_rate() == rate {
                clip
            } else {
                resample(&clip, rate)?
            };
            let mut samples = clip.into_samples();
            samples.resize(num_samples, 0.0);
            let spec = mel.compute(&AudioClip::new(samples, rate)?)?;
            let raw = read_png(r.frame_path(root))?;
            let (_, h, w) = raw.dim();
            Ok(LoadedClip {
                record: r.clone(),
                spec: spec.values,
                frame: resize_frame(&raw, side),
                source_size: (h, w),
            })
        })
        .collect()
}

/// A single-source clip held in memory, ready for mixing.
#[derive(Debug, Clone)]
pub struct SoloClip {
    pub clip_id: String,
    pub category: usize,
    pub audio: AudioClip,
    pub frame: Array3<f32>,
    pub bbox: Option<[u32; 4]>,
}

#[derive(Debug, Clone)]
pub struct Cocktail {
    pub clip_id: String,
    pub audio: AudioClip,
    pub frame: Array3<f32>,
    pub objects: Vec<ObjectAnnotation>,
    /// Gain applied to each input in category order; zero for silent ones.
    pub gains: Vec<f32>,
    pub sources: Vec<String>,
}

/// Tiles four single-source clips of distinct categories into a 2x2 frame
/// (sorted by category, row-major) and mixes the audio of two of them.
pub fn synthesize_cocktail(solos: &[SoloClip], clip_id: &str, seed: u64) -> Result<Cocktail> {
    if solos.len() != 4 {
        return Err(invalid!("cocktail needs exactly 4 clips, got {}", solos.len()));
    }
    let cats: BTreeSet<usize> = solos.iter().map(|s| s.category).collect();
    if cats.len() != 4 {
        return Err(invalid!("cocktail clips must have distinct categories"));
    }
    let rate = solos[0].audio.sample_rate();
    let len = solos[0].audio.len();
    if solos.iter().any(|s| s.audio.sample_rate() != rate || s.audio.len() != len) {
        return Err(invalid!("cocktail clips differ in duration or sample rate"));
    }
    let (ch, side, w) = solos[0].frame.dim();
    if side != w || side % 2 != 0 || solos.iter().any(|s| s.frame.dim() != (ch, side, w)) {
        return Err(invalid!("cocktail frames must share one even square side"));
    }

    let mut order: Vec<&SoloClip> = solos.iter().collect();
    order.sort_by_key(|s| s.category);
    let half = side / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = [0usize, 1, 2, 3];
    picks.shuffle(&mut rng);
    let sounding: BTreeSet<usize> = picks[..2].iter().copied().collect();

    let mut frame = Array3::zeros((ch, side, side));
    let mut objects = Vec::with_capacity(4);
    let mut gains = vec![0.0f32; 4];
    let mut mix = vec![0.0f32; len];
    for (tile, solo) in order.iter().enumerate() {
        let (oy, ox) = ((tile / 2) * half, (tile % 2) * half);
        frame
            .slice_mut(s![.., oy..oy + half, ox..ox + half])
            .assign(&resize_frame(&solo.frame, half));
        let [x0, y0, x1, y1] = solo.bbox.unwrap_or([0, 0, side as u32, side as u32]);
        let bbox = [
            ox as u32 + x0 / 2,
            oy as u32 + y0 / 2,
            ox as u32 + x1.div_ceil(2),
            oy as u32 + y1.div_ceil(2),
        ];
        let on = sounding.contains(&tile);
        objects.push(ObjectAnnotation {
            category: solo.category,
            bbox,
            sounding: on,
        });
        if on {
            let g = rng.random_range(0.5f32..=1.5);
            gains[tile] = g;
            for (m, &v) in mix.iter_mut().zip(solo.audio.samples()) {
                *m += g * v;
            }
        }
    }
    let peak = mix.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    if peak > 1.0 {
        mix.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(Cocktail {
        clip_id: clip_id.to_string(),
        audio: AudioClip::new(mix, rate)?,
        frame,
        objects,
        gains,
        sources: order.iter().map(|s| s.clip_id.clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

impl Shape {
    /// Whether the unit-box point `(u, v)` in [-1, 1]^2 lies inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub num_categories: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<[f32; 3]>,
    /// Fundamental of each category's tone, Hz.
    pub tones: Vec<f64>,
    pub image_size: usize,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub multi_train: usize,
    pub multi_test: usize,
    /// Object extent as a fraction of the image side.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Categories (highest indices) withheld from the single-source splits.
    pub missing_categories: usize,
    /// Fraction of single-source training clips whose audio is replaced by a mixture.
    pub noise_rate: f64,
    /// Amplitude of background pixel noise around mid grey.
    pub background_noise: f32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_categories: 4,
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Diamond, Shape::Ring],
            colors: vec![
                [0.9, 0.15, 0.1],
                [0.1, 0.75, 0.2],
                [0.15, 0.3, 0.95],
                [0.95, 0.85, 0.1],
                [0.8, 0.2, 0.85],
                [0.1, 0.85, 0.9],
            ],
            tones: vec![300.0, 700.0, 1600.0, 2500.0, 1100.0, 450.0],
            image_size: 64,
            sample_rate: 16_000,
            duration_s: 1.0,
            train_per_category: 100,
            test_per_category: 25,
            multi_train: 200,
            multi_test: 100,
            min_scale: 0.3,
            max_scale: 0.5,
            missing_categories: 0,
            noise_rate: 0.0,
            background_noise: 0.2,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_categories;
        if n < 4 {
            return Err(invalid!("toy dataset needs at least 4 categories for cocktails"));
        }
        if self.shapes.len() < n || self.colors.len() < n || self.tones.len() < n {
            return Err(invalid!("shape, colour and tone tables need {n} entries"));
        }
        let looks: BTreeSet<(Shape, u64)> = (0..n).map(|c| (self.shapes[c], self.tones[c].to_bits())).collect();
        if looks.len() != n {
            return Err(invalid!("categories need distinct (shape, tone) pairs"));
        }
        let mut mels: Vec<f64> = self.tones[..n].iter().map(|&f| crate::audio::hz_to_mel(f)).collect();
        mels.sort_by(f64::total_cmp);
        // One band of the 64-band front end spans roughly 2840 / 65 mel.
        let band = crate::audio::hz_to_mel(8000.0) / 65.0;
        if mels.windows(2).any(|w| w[1] - w[0] < band) {
            return Err(invalid!("tones must be at least one mel band apart"));
        }
        if self.tones[..n].iter().any(|&f| !(f > 0.0) || 3.0 * f >= self.sample_rate as f64 / 2.0) {
            return Err(invalid!("tone harmonics must stay below Nyquist"));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(2) {
            return Err(invalid!("image size must be even and at least 8"));
        }
        if !(0.0 < self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return Err(invalid!("object scale range must satisfy 0 < min <= max <= 1"));
        }
        if self.missing_categories >= n {
            return Err(invalid!("cannot withhold every category"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(invalid!("noise rate must lie in [0, 1]"));
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 {
            return Err(invalid!("duration and sample rate must be positive"));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    /// Categories present in the single-source splits.
    pub fn single_categories(&self) -> std::ops::Range<usize> {
        0..self.num_categories - self.missing_categories
    }
}

/// Stable per-clip RNG stream derived from the dataset seed and clip id.
pub fn clip_rng(seed: u64, clip_id: &str) -> ChaCha8Rng {
    // FNV-1a over the id keeps streams independent of generation order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in clip_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// A rendered frame with its exact object mask.
pub struct Render {
    pub frame: Array3<f32>,
    pub mask: Array2<bool>,
    pub bbox: [u32; 4],
}

pub fn render_object(cfg: &ToyConfig, category: usize, rng: &mut ChaCha8Rng) -> Render {
    let side = cfg.image_size;
    let mut frame = Array3::zeros((3, side, side));
    for y in 0..side {
        for x in 0..side {
            let grey = 0.5 + rng.random_range(-cfg.background_noise..=cfg.background_noise);
            for c in 0..3 {
                frame[[c, y, x]] = grey;
            }
        }
    }
    let extent = (rng.random_range(cfg.min_scale..=cfg.max_scale) * side as f64).round().max(3.0) as usize;
    let extent = extent.min(side);
    let x0 = rng.random_range(0..=side - extent);
    let y0 = rng.random_range(0..=side - extent);
    let shape = cfg.shapes[category];
    let color = cfg.colors[category];
    let mut mask = Array2::from_elem((side, side), false);
    let half = extent as f64 / 2.0;
    for y in y0..y0 + extent {
        for x in x0..x0 + extent {
            let u = (x as f64 + 0.5 - x0 as f64 - half) / half;
            let v = (y as f64 + 0.5 - y0 as f64 - half) / half;
            if shape.contains(u, v) {
                mask[[y, x]] = true;
                for c in 0..3 {
                    frame[[c, y, x]] = color[c];
                }
            }
        }
    }
    let bbox = mask_bbox(&mask).expect("shape covers at least one pixel");
    Render { frame, mask, bbox }
}

/// Tight `[x0, y0, x1, y1]` around the set cells.
pub fn mask_bbox(mask: &Array2<bool>) -> Option<[u32; 4]> {
    let mut b: Option<[u32; 4]> = None;
    for ((y, x), &on) in mask.indexed_iter() {
        if on {
            let (x, y) = (x as u32, y as u32);
            let e = b.get_or_insert([x, y, x + 1, y + 1]);
            e[0] = e[0].min(x);
            e[1] = e[1].min(y);
            e[2] = e[2].max(x + 1);
            e[3] = e[3].max(y + 1);
        }
    }
    b
}

/// Harmonic tone of `category` with amplitude and slight pitch jitter.
pub fn render_tone(cfg: &ToyConfig, category: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cfg.num_samples();
    let rate = cfg.sample_rate as f64;
    let f0 = cfg.tones[category] * rng.random_range(0.98..=1.02);
    let amp = rng.random_range(0.15..=0.3);
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let v = (2.0 * PI * f0 * t + phase[0]).sin()
                + 0.5 * (4.0 * PI * f0 * t + phase[1]).sin()
                + 0.25 * (6.0 * PI * f0 * t + phase[2]).sin();
            (amp * v / 1.75 + rng.random_range(-0.01..=0.01)) as f32
        })
        .collect()
}

pub fn render_solo(cfg: &ToyConfig, clip_id: &str, category: usize) -> Result<SoloClip> {
    let mut rng = clip_rng(cfg.seed, clip_id);
    let r = render_object(cfg, category, &mut rng);
    let audio = AudioClip::new(render_tone(cfg, category, &mut rng), cfg.sample_rate)?;
    Ok(SoloClip {
        clip_id: clip_id.to_string(),
        category,
        audio,
        frame: r.frame,
        bbox: Some(r.bbox),
    })
}

/// Paths of the manifests written by [`generate_toy_dataset`].
#[derive(Debug, Clone, Serialize)]
pub struct ToyManifests {
    pub single_train: PathBuf,
    pub single_test: PathBuf,
    pub multi_train: PathBuf,
    pub multi_test: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToySummary {
    pub manifests: ToyManifests,
    pub counts: BTreeMap<String, usize>,
    pub noisy_clips: usize,
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

/// Writes WAV and PNG media plus four JSONL manifests under `out`.
pub fn generate_toy_dataset(cfg: &ToyConfig, out: &Path) -> Result<ToySummary> {
    cfg.validate()?;
    ensure_dir(&out.join("audio"))?;
    ensure_dir(&out.join("frames"))?;

    let write_media = |id: &str, audio: &AudioClip, frame: &Array3<f32>| -> Result<(PathBuf, PathBuf)> {
        let a = PathBuf::from("audio").join(format!("{id}.wav"));
        let f = PathBuf::from("frames").join(format!("{id}.png"));
        write_wav_pcm16(out.join(&a), audio)?;
        write_png(out.join(&f), frame)?;
        Ok((a, f))
    };

    let mut noisy_clips = 0;
    let mut singles = |prefix: &str, per_category: usize, noise_rate: f64| -> Result<Vec<ClipRecord>> {
        let mut ids = Vec::new();
        for c in cfg.single_categories() {
            for i in 0..per_category {
                ids.push((format!("{prefix}_c{c}_{i:04}"), c));
            }
        }
        let noisy_count = (noise_rate * ids.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.shuffle(&mut clip_rng(cfg.seed, &format!("{prefix}#noise")));
        let noisy: BTreeSet<usize> = order[..noisy_count].iter().copied().collect();
        noisy_clips += noisy_count;

        ids.iter()
            .enumerate()
            .map(|(idx, (id, c))| {
                let mut solo = render_solo(cfg, id, *c)?;
                let mut audio_category = None;
                if noisy.contains(&idx) {
                    // Two other sources replace the clip's own sound.
                    let mut rng = clip_rng(cfg.seed, &format!("{id}#noise"));
                    let mut others: Vec<usize> = (0..cfg.num_categories).filter(|o| o != c).collect();
                    others.shuffle(&mut rng);
                    let a = render_tone(cfg, others[0], &mut rng);
                    let b = render_tone(cfg, others[1], &mut rng);
                    let mix: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + 0.5 * y).collect();
                    solo.audio = AudioClip::new(mix, cfg.sample_rate)?;
                    audio_category = Some(others[0]);
                }
                let (audio, frame) = write_media(id, &solo.audio, &solo.frame)?;
                Ok(ClipRecord {
                    clip_id: id.clone(),
                    audio,
                    frame,
                    split: Split::Single,
                    category: Some(*c),
                    audio_category,
                    objects: vec![ObjectAnnotation {
                        category: *c,
                        bbox: solo.bbox.unwrap(),
                        sounding: true,
                    }],
                })
            })
            .collect()
    };
    let single_train = singles("solo_train", cfg.train_per_category, cfg.noise_rate)?;
    let single_test = singles("solo_test", cfg.test_per_category, 0.0)?;

    let multis = |prefix: &str, count: usize| -> Result<Vec<ClipRecord>> {
        (0..count)
            .map(|i| {
                let id = format!("{prefix}_{i:04}");
                let mut rng = clip_rng(cfg.seed, &id);
                let mut cats: Vec<usize> = (0..cfg.num_categories).collect();
                cats.shuffle(&mut rng);
                let solos = cats[..4]
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| render_solo(cfg, &format!("{id}_src{j}"), c))
                    .collect::<Result<Vec<_>>>()?;
                let mix = synthesize_cocktail(&solos, &id, rng.random())?;
                let (audio, frame) = write_media(&id, &mix.audio, &mix.frame)?;
                Ok(ClipRecord {
                    clip_id: id,
                    audio,
                    frame,
                    split: Split::Multi,
                    category: None,
                    audio_category: None,
                    objects: mix.objects,
                })
            })
            .collect()
    };
    let multi_train = multis("mix_train", cfg.multi_train)?;
    let multi_test = multis("mix_test", cfg.multi_test)?;
    check_partition([&single_train[..], &single_test[..], &multi_train[..], &multi_test[..]])?;

    let manifests = ToyManifests {
        single_train: out.join("single_train.jsonl"),
        single_test: out.join("single_test.jsonl"),
        multi_train: out.join("multi_train.jsonl"),
        multi_test: out.join("multi_test.jsonl"),
    };
    write_manifest(&manifests.single_train, &single_train)?;
    write_manifest(&manifests.single_test, &single_test)?;
    write_manifest(&manifests.multi_train, &multi_train)?;
    write_manifest(&manifests.multi_test, &multi_test)?;

    let counts = BTreeMap::from([
        ("single_train".to_string(), single_train.len()),
        ("single_test".to_string(), single_test.len()),
        ("multi_train".to_string(), multi_train.len()),
        ("multi_test".to_string(), multi_test.len()),
    ]);
    Ok(ToySummary {
        manifests,
        counts,
        noisy_clips,
    })
}

/// Reads a single-source clip's media for mixing; audio is resampled to
/// `sample_rate`.
pub fn load_solo(record: &ClipRecord, root: &Path, sample_rate: u32) -> Result<SoloClip> {
    let category = record
        .category
        .ok_or_else(|| invalid!("`{}` has no category to mix", record.clip_id))?;
    let audio = resample(&read_wav(record.audio_path(root))?, sample_rate)?;
    Ok(SoloClip {
        clip_id: record.clip_id.clone(),
        category,
        audio,
        frame: read_png(record.frame_path(root))?,
        bbox: record.objects.first().map(|o| o.bbox),
    })
}

/// Mixes `count` cocktails from single-source clips, each drawing four
/// distinct categories and one clip per category. Media go under `out`;
/// the returned records use paths relative to it.
pub fn synthesize_cocktails(solos: &[SoloClip], count: usize, seed: u64, prefix: &str, out: &Path) -> Result<Vec<ClipRecord>> {
    let mut by_category: BTreeMap<usize, Vec<&SoloClip>> = BTreeMap::new();
    for solo in solos {
        by_category.entry(solo.category).or_default().push(solo);
    }
    if by_category.len() < 4 {
        return Err(invalid!("cocktails need clips of 4 categories, found {}", by_category.len()));
    }
    ensure_dir(&out.join("audio"))?;
    ensure_dir(&out.join("frames"))?;
    let categories: Vec<usize> = by_category.keys().copied().collect();
    (0..count)
        .map(|i| {
            let id = format!("{prefix}_{i:04}");
            let mut rng = clip_rng(seed, &id);
            let picked: Vec<SoloClip> = categories
                .choose_multiple(&mut rng, 4)
                .map(|c| (*by_category[c].choose(&mut rng).unwrap()).clone())
                .collect();
            let mix = synthesize_cocktail(&picked, &id, rng.random())?;
            let audio = PathBuf::from("audio").join(format!("{id}.wav"));
            let frame = PathBuf::from("frames").join(format!("{id}.png"));
            write_wav_pcm16(out.join(&audio), &mix.audio)?;
            write_png(out.join(&frame), &mix.frame)?;
            Ok(ClipRecord {
                clip_id: id,
                audio,
                frame,
                split: Split::Multi,
                category: None,
                audio_category: None,
                objects: mix.objects,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ToyConfig {
        ToyConfig {
            train_per_category: 5,
            test_per_category: 2,
            multi_train: 3,
            multi_test: 2,
            ..ToyConfig::default()
        }
    }

    fn solos(seed: u64) -> Vec<SoloClip> {
        let cfg = ToyConfig { seed, ..small_cfg() };
        (0..4).map(|c| render_solo(&cfg, &format!("s{c}"), c).unwrap()).collect()
    }

    #[test]
    fn empty_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let single = |id: &str| ClipRecord {
            clip_id: id.into(),
            audio: "a.wav".into(),
            frame: "f.png".into(),
            split: Split::Single,
            category: Some(1),
            audio_category: None,
            objects: vec![],
        };
        let multi = ClipRecord {
            clip_id: "m".into(),
            audio: "m.wav".into(),
            frame: "m.png".into(),
            split: Split::Multi,
            category: None,
            audio_category: None,
            objects: vec![
                ObjectAnnotation { category: 0, bbox: [0, 0, 4, 4], sounding: true },
                ObjectAnnotation { category: 2, bbox: [4, 4, 8, 8], sounding: false },
            ],
        };
        let recs = vec![single("a"), single("b"), multi.clone()];
        write_manifest(&p, &recs).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), recs);

        let clash = ClipRecord { clip_id: "a".into(), ..multi };
        write_manifest(&p, &[single("a"), clash]).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Partition(_))));

        fs::write(&p, "{\"clip_id\":\"x\"}\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 1, .. })));
        fs::write(&p, "\n{\"clip_id\":\"x\",\"audio\":\"a\",\"frame\":\"f\",\"split\":\"single\"}\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn cocktail_contract() {
        let s = solos(3);
        let c = synthesize_cocktail(&s, "mix", 9).unwrap();
        assert_eq!(c.frame.dim(), s[0].frame.dim());
        assert_eq!(c.objects.iter().filter(|o| o.sounding).count(), 2);
        let again = synthesize_cocktail(&s, "mix", 9).unwrap();
        assert_eq!(c.audio, again.audio);
        assert_eq!(c.frame, again.frame);
        for (o, g) in c.objects.iter().zip(&c.gains) {
            assert_eq!(o.sounding, *g > 0.0);
            assert!(!o.sounding || (0.5..=1.5).contains(g));
        }
        // Tiles in category order, row-major.
        let half = 32;
        for (t, o) in c.objects.iter().enumerate() {
            assert_eq!(o.category, t);
            let (oy, ox) = ((t / 2) * half, (t % 2) * half);
            assert!(o.bbox[0] >= ox as u32 && o.bbox[2] <= (ox + half) as u32);
            assert!(o.bbox[1] >= oy as u32 && o.bbox[3] <= (oy + half) as u32);
        }
    }

    #[test]
    fn cocktail_rejects_bad_inputs() {
        let mut s = solos(1);
        s[1].category = 0;
        assert!(synthesize_cocktail(&s, "x", 0).is_err());
        let mut s = solos(1);
        s[2].audio = AudioClip::new(vec![0.0; 100], 16_000).unwrap();
        assert!(synthesize_cocktail(&s, "x", 0).is_err());
        assert!(synthesize_cocktail(&solos(1)[..3], "x", 0).is_err());
    }

    #[test]
    fn render_box_covers_exactly_the_shape() {
        let cfg = small_cfg();
        for c in 0..4 {
            let mut rng = clip_rng(7, &format!("r{c}"));
            let r = render_object(&cfg, c, &mut rng);
            let [x0, y0, x1, y1] = r.bbox;
            let color = cfg.colors[c];
            for ((y, x), &on) in r.mask.indexed_iter() {
                let inside = (x0..x1).contains(&(x as u32)) && (y0..y1).contains(&(y as u32));
                assert!(!on || inside);
                let px = [r.frame[[0, y, x]], r.frame[[1, y, x]], r.frame[[2, y, x]]];
                assert_eq!(on, px == color);
            }
            for x in x0..x1 {
                assert!((y0..y1).any(|y| r.mask[[y as usize, x as usize]]));
            }
            for y in y0..y1 {
                assert!((x0..x1).any(|x| r.mask[[y as usize, x as usize]]));
            }
        }
    }

    #[test]
    fn toy_config_validation() {
        assert!(ToyConfig::default().validate().is_ok());
        let mut cfg = ToyConfig::default();
        cfg.tones[1] = 310.0;
        assert!(cfg.validate().is_err());
        let cfg = ToyConfig { missing_categories: 4, ..ToyConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_generation_counts_and_knobs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            missing_categories: 1,
            noise_rate: 0.2,
            ..small_cfg()
        };
        let summary = generate_toy_dataset(&cfg, dir.path()).unwrap();
        let train = load_manifest(&summary.manifests.single_train).unwrap();
        assert_eq!(train.len(), 15);
        assert!(train.iter().all(|r| r.category != Some(3)));
        assert_eq!(train.iter().filter(|r| r.audio_category.is_some()).count(), 3);
        let multi = load_manifest(&summary.manifests.multi_train).unwrap();
        assert!(multi.iter().all(|r| r.objects.iter().any(|o| o.category == 3)));
        let test = load_manifest(&summary.manifests.single_test).unwrap();
        check_partition([&train[..], &test[..], &multi[..]]).unwrap();

        let mel = LogMel::new(Default::default()).unwrap();
        let loaded = load_clips(&multi[..1], dir.path(), &mel, 16_000, 64).unwrap();
        assert_eq!(loaded[0].spec.dim(), (201, 64));
        assert_eq!(loaded[0].frame.dim(), (3, 64, 64));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let sa = generate_toy_dataset(&cfg, a.path()).unwrap();
        let sb = generate_toy_dataset(&cfg, b.path()).unwrap();
        for (x, y) in [(&sa.manifests.multi_train, &sb.manifests.multi_train), (&sa.manifests.single_train, &sb.manifests.single_train)] {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let wav = "audio/mix_train_0001.wav";
        assert_eq!(fs::read(a.path().join(wav)).unwrap(), fs::read(b.path().join(wav)).unwrap());
    }
}
