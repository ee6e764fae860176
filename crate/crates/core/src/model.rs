//! Audio and visual encoders, the cosine localization head and the two
//! classification heads, plus checkpoint persistence.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Tensor, TensorArchive};
use crate::audio::LogMelSpectrogram;
use crate::error::{invalid, shape_err, Error, Result};
use crate::math::{cast, norm, sigmoid, NORM_FLOOR};
use crate::nn::{self, Conv2d, ConvCache, Mlp, MlpCache, ParamStore};

/// RGB image, `3 x H x W`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFrame {
    pub pixels: Array3<f32>,
}

impl VisualFrame {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        if pixels.shape()[0] != 3 {
            return Err(invalid!("expected 3 colour channels, got {}", pixels.shape()[0]));
        }
        Ok(Self { pixels })
    }

    pub fn side(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }
}

/// `C x H x W` visual features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f32>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }
}

/// Globally pooled audio descriptor of length `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbedding {
    pub values: Array1<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapRange {
    Probability,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub values: Array2<f32>,
    pub range: MapRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels `C` shared by both encoders.
    pub channels: usize,
    /// Output widths of all visual conv blocks except the last (which emits `C`).
    pub visual_widths: Vec<usize>,
    pub visual_strides: Vec<usize>,
    pub audio_widths: Vec<usize>,
    pub audio_strides: Vec<usize>,
    pub image_size: usize,
    pub audio_frames: usize,
    pub audio_mels: usize,
    /// Dictionary size `K`.
    pub clusters: usize,
    pub num_categories: usize,
    /// Hidden width of the classification heads; `0` means `2C`.
    pub head_hidden: usize,
    pub lambda: f32,
    pub audio_mean: f32,
    pub audio_std: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            visual_widths: vec![16, 32],
            visual_strides: vec![2, 2, 2],
            audio_widths: vec![8, 16, 32],
            audio_strides: vec![2, 2, 2, 2],
            image_size: 64,
            audio_frames: 201,
            audio_mels: 64,
            clusters: 4,
            num_categories: 4,
            head_hidden: 0,
            lambda: 0.5,
            audio_mean: -2.0,
            audio_std: 2.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(invalid!("channels must be positive"));
        }
        if self.visual_strides.len() != self.visual_widths.len() + 1 {
            return Err(invalid!("visual_strides needs one entry per conv block"));
        }
        if self.audio_strides.len() != self.audio_widths.len() + 1 {
            return Err(invalid!("audio_strides needs one entry per conv block"));
        }
        if self.visual_strides.iter().chain(&self.audio_strides).any(|&s| s == 0) {
            return Err(invalid!("strides must be positive"));
        }
        if !self.image_size.is_multiple_of(self.visual_stride()) {
            return Err(invalid!(
                "image size {} not divisible by encoder stride {}",
                self.image_size,
                self.visual_stride()
            ));
        }
        if self.num_categories == 0 || self.clusters < self.num_categories {
            return Err(invalid!(
                "K ({}) must be at least the number of categories ({})",
                self.clusters,
                self.num_categories
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid!("lambda must be non-negative"));
        }
        if !(self.audio_std > 0.0) {
            return Err(invalid!("audio_std must be positive"));
        }
        Ok(())
    }

    pub fn visual_stride(&self) -> usize {
        self.visual_strides.iter().product()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.visual_stride()
    }

    pub fn hidden(&self) -> usize {
        if self.head_hidden == 0 {
            2 * self.channels
        } else {
            self.head_hidden
        }
    }
}

/// Which parameter groups a training phase updates.
pub mod groups {
    pub const VISUAL: &str = "visual.";
    pub const AUDIO: &str = "audio.";
    pub const LOC: &str = "loc.";
    pub const HEAD_A: &str = "head_a.";
    pub const HEAD_V: &str = "head_v.";
}

pub const LOC_WEIGHT: &str = "loc.weight";
pub const LOC_BIAS: &str = "loc.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Init,
    Stage1,
    Stage2,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stage: StageTag,
    /// Set once the classification heads have received a training step.
    pub heads_trained: bool,
    visual: Vec<Conv2d>,
    audio: Vec<Conv2d>,
    head_a: Mlp,
    head_v: Mlp,
}

pub struct EncoderCache {
    layers: Vec<(ConvCache, Array4<f32>)>,
    out_shape: (usize, usize, usize, usize),
}

pub struct HeadCache {
    mlp: MlpCache,
    pooled_from: Option<(usize, usize, usize, usize)>,
}

fn conv_stack(prefix: &str, cin: usize, widths: &[usize], out: usize, strides: &[usize]) -> Vec<Conv2d> {
    let mut chans = vec![cin];
    chans.extend_from_slice(widths);
    chans.push(out);
    strides
        .iter()
        .enumerate()
        .map(|(i, &s)| Conv2d::new(format!("{prefix}.conv{i}"), chans[i], chans[i + 1], 3, s))
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let visual = conv_stack("visual", 3, &config.visual_widths, c, &config.visual_strides);
        let audio = conv_stack("audio", 1, &config.audio_widths, c, &config.audio_strides);
        let head_a = Mlp::new("head_a", c, config.hidden(), config.clusters);
        let head_v = Mlp::new("head_v", c, config.hidden(), config.clusters);

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for layer in visual.iter().chain(&audio) {
            layer.init(&mut params, &mut rng);
        }
        head_a.init(&mut params, &mut rng);
        head_v.init(&mut params, &mut rng);
        // Identity-scale 1x1 conv so the untrained map is sigmoid(cosine).
        params.insert(LOC_WEIGHT, ndarray::arr1(&[1.0f32]).into_dyn());
        params.insert(LOC_BIAS, ndarray::arr1(&[0.0f32]).into_dyn());

        Ok(Self {
            config,
            params,
            stage: StageTag::Init,
            heads_trained: false,
            visual,
            audio,
            head_a,
            head_v,
        })
    }

    pub fn loc_weight(&self) -> f32 {
        self.params.scalar(LOC_WEIGHT)
    }

    pub fn loc_bias(&self) -> f32 {
        self.params.scalar(LOC_BIAS)
    }

    /// Batched visual forward: `B x 3 x H x W` -> `B x C x h x w`.
    pub fn visual_forward(&self, frames: ArrayView4<f32>) -> Result<(Array4<f32>, EncoderCache)> {
        let (_, ch, h, w) = frames.dim();
        if ch != 3 {
            return Err(invalid!("expected 3 colour channels, got {ch}"));
        }
        let stride = self.config.visual_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(invalid!("frame {h}x{w} not divisible by encoder stride {stride}"));
        }
        let x = frames.permuted_axes([1, 0, 2, 3]).mapv(|v| v - 0.5);
        let (y, cache) = run_stack(&self.visual, &self.params, x);
        Ok((y.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned(), cache))
    }

    pub fn visual_backward(&self, cache: &EncoderCache, dfeat: ArrayView4<f32>, grads: &mut ParamStore) {
        let dy = dfeat.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned();
        backprop_stack(&self.visual, &self.params, cache, dy, grads);
    }

    /// Batched audio forward: `B x T x M` log-mel -> `B x C`.
    pub fn audio_forward(&self, specs: ArrayView3<f32>) -> Result<(Array2<f32>, EncoderCache)> {
        let (b, t, m) = specs.dim();
        if t != self.config.audio_frames || m != self.config.audio_mels {
            return Err(invalid!(
                "spectrogram {t}x{m} does not match configured {}x{}",
                self.config.audio_frames,
                self.config.audio_mels
            ));
        }
        let (mean, std) = (self.config.audio_mean, self.config.audio_std);
        let x = specs
            .mapv(|v| (v - mean) / std)
            .into_shape_with_order((1, b, t, m))
            .unwrap();
        let (y, cache) = run_stack(&self.audio, &self.params, x);
        Ok((nn::global_avg_pool_cb(y.view()), cache))
    }

    pub fn audio_backward(&self, cache: &EncoderCache, demb: ArrayView2<f32>, grads: &mut ParamStore) {
        let dy = nn::global_avg_pool_backward_cb(demb, cache.out_shape);
        backprop_stack(&self.audio, &self.params, cache, dy, grads);
    }

    pub fn head_a_forward(&self, emb: ArrayView2<f32>) -> (Array2<f32>, HeadCache) {
        let (logits, mlp) = self.head_a.forward(&self.params, emb);
        (logits, HeadCache { mlp, pooled_from: None })
    }

    pub fn head_a_backward(&self, cache: &HeadCache, dlogits: ArrayView2<f32>, grads: &mut ParamStore) -> Array2<f32> {
        self.head_a.backward(&self.params, &cache.mlp, dlogits, grads)
    }

    /// `h_v` on the globally average-pooled feature map.
    pub fn head_v_forward(&self, feats: ArrayView4<f32>) -> (Array2<f32>, HeadCache) {
        let pooled = pool_features(feats);
        let (logits, mlp) = self.head_v.forward(&self.params, pooled.view());
        (
            logits,
            HeadCache {
                mlp,
                pooled_from: Some(feats.dim()),
            },
        )
    }

    /// Returns `dL/dfeatures` (`B x C x h x w`).
    pub fn head_v_backward(&self, cache: &HeadCache, dlogits: ArrayView2<f32>, grads: &mut ParamStore) -> Array4<f32> {
        let dpooled = self.head_v.backward(&self.params, &cache.mlp, dlogits, grads);
        let (b, c, h, w) = cache.pooled_from.expect("head_v cache");
        let area = (h * w) as f32;
        Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| dpooled[[bi, ci]] / area)
    }

    pub fn encode_visual(&self, frame: &VisualFrame) -> Result<FeatureMap> {
        let batch = frame.pixels.view().insert_axis(Axis(0));
        let (f, _) = self.visual_forward(batch)?;
        Ok(FeatureMap {
            values: f.index_axis_move(Axis(0), 0),
        })
    }

    pub fn encode_audio(&self, spec: &LogMelSpectrogram) -> Result<AudioEmbedding> {
        let batch = spec.values.view().insert_axis(Axis(0));
        let (g, _) = self.audio_forward(batch)?;
        Ok(AudioEmbedding {
            values: g.index_axis_move(Axis(0), 0),
        })
    }

    pub fn localization_map(&self, g: &AudioEmbedding, f: &FeatureMap) -> Result<LocalizationMap> {
        if g.values.len() != f.channels() {
            return Err(shape_err!(
                "audio embedding has {} channels, feature map {}",
                g.values.len(),
                f.channels()
            ));
        }
        Ok(LocalizationMap {
            values: localization_map(g.values.view(), f.values.view(), self.loc_weight(), self.loc_bias()),
            range: MapRange::Probability,
        })
    }

    pub fn classify_audio(&self, g: &AudioEmbedding) -> Result<Array1<f32>> {
        if g.values.len() != self.config.channels {
            return Err(shape_err!("embedding length {} != C {}", g.values.len(), self.config.channels));
        }
        let (logits, _) = self.head_a_forward(g.values.view().insert_axis(Axis(0)));
        Ok(logits.index_axis_move(Axis(0), 0))
    }

    pub fn classify_visual(&self, f: &FeatureMap) -> Result<Array1<f32>> {
        if f.channels() != self.config.channels {
            return Err(shape_err!("feature map has {} channels, C is {}", f.channels(), self.config.channels));
        }
        let (logits, _) = self.head_v_forward(f.values.view().insert_axis(Axis(0)));
        Ok(logits.index_axis_move(Axis(0), 0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ar = TensorArchive::new(json!({
            "kind": "checkpoint",
            "stage": self.stage,
            "seed": self.config.seed,
            "heads_trained": self.heads_trained,
            "config": self.config,
        }));
        for (name, t) in self.params.iter() {
            ar.insert(name.clone(), Tensor::F32(t.clone()));
        }
        ar.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ar = TensorArchive::load(path)?;
        if ar.meta.get("kind").and_then(|v| v.as_str()) != Some("checkpoint") {
            return Err(Error::corrupt(path, "not a model checkpoint"));
        }
        let config: ModelConfig = serde_json::from_value(ar.meta["config"].clone())
            .map_err(|e| Error::corrupt(path, format!("config: {e}")))?;
        let stage: StageTag = serde_json::from_value(ar.meta["stage"].clone())
            .map_err(|e| Error::corrupt(path, format!("stage: {e}")))?;
        let mut model = Model::new(config)?;
        model.stage = stage;
        model.heads_trained = ar.meta["heads_trained"].as_bool().unwrap_or(false);
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            let stored = ar.f32(&name)?;
            let slot = model.params.get_mut(&name);
            if stored.shape() != slot.shape() {
                return Err(shape_err!(
                    "tensor `{name}` has shape {:?}, configuration expects {:?}",
                    stored.shape(),
                    slot.shape()
                ));
            }
            slot.assign(stored);
        }
        if ar.tensors.len() != model.params.len() {
            return Err(shape_err!(
                "checkpoint holds {} tensors, configuration expects {}",
                ar.tensors.len(),
                model.params.len()
            ));
        }
        Ok(model)
    }
}

fn run_stack(layers: &[Conv2d], params: &ParamStore, mut x: Array4<f32>) -> (Array4<f32>, EncoderCache) {
    let mut caches = Vec::with_capacity(layers.len());
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        let (mut y, cache) = layer.forward(params, x.view());
        if i != last {
            nn::relu_inplace(&mut y);
        }
        caches.push((cache, y.clone()));
        x = y;
    }
    let out_shape = x.dim();
    (
        x,
        EncoderCache {
            layers: caches,
            out_shape,
        },
    )
}

fn backprop_stack(layers: &[Conv2d], params: &ParamStore, cache: &EncoderCache, mut dy: Array4<f32>, grads: &mut ParamStore) {
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate().rev() {
        let (conv_cache, act) = &cache.layers[i];
        if i != last {
            nn::relu_backward(&mut dy, act);
        }
        match layer.backward(params, conv_cache, dy.view(), grads, i > 0) {
            Some(dx) => dy = dx,
            None => break,
        }
    }
}

/// Spatial mean of a `B x C x H x W` batch.
pub fn pool_features(feats: ArrayView4<f32>) -> Array2<f32> {
    let (b, c, _, _) = feats.dim();
    Array2::from_shape_fn((b, c), |(bi, ci)| feats.slice(s![bi, ci, .., ..]).mean().unwrap_or(0.0))
}

/// Per-cell cosine similarity between `g` (length C) and each column of `f`
/// (`C x H x W`). Zero-norm vectors give similarity 0.
pub fn cosine_map<F: NdFloat>(g: ArrayView1<F>, f: ArrayView3<F>) -> Array2<F> {
    let (_, h, w) = f.dim();
    let gn = norm(g);
    let floor = cast::<F>(NORM_FLOOR);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let col = f.slice(s![.., i, j]);
        let fnorm = norm(col);
        if gn < floor || fnorm < floor {
            F::zero()
        } else {
            g.dot(&col) / (gn * fnorm)
        }
    })
}

/// `sigmoid(w * cos + b)` per spatial cell.
pub fn localization_map<F: NdFloat>(g: ArrayView1<F>, f: ArrayView3<F>, weight: F, bias: F) -> Array2<F> {
    cosine_map(g, f).mapv(|c| sigmoid(weight * c + bias))
}
