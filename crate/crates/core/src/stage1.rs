//! Stage one: audiovisual correspondence over matched and mismatched pairs,
//! masked object representations, and the alternating
//! localization / pseudo-label classification schedule.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, NdFloat};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LoadedClip;
use crate::dictionary::{
    assign_categories, dictionary_from_labels, fit_dictionary, refine_dictionary, KMeansOptions, ObjectDictionary,
    DEFAULT_ENUMERATION_CAP,
};
use crate::error::{invalid, shape_err, Result};
use crate::math::{cast, log_softmax, norm, sigmoid, softmax, softplus, NORM_FLOOR};
use crate::model::{cosine_map, groups, Model, StageTag, LOC_BIAS, LOC_WEIGHT};
use crate::nn::{Adam, ParamStore};

/// One (audio, visual) combination inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub audio: usize,
    pub visual: usize,
    pub matched: bool,
}

#[derive(Debug, Clone)]
pub struct PairBatch {
    /// `B x C`.
    pub audio: Array2<f32>,
    /// `B x C x H x W`.
    pub visual: Array4<f32>,
    pub clip_ids: Vec<String>,
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn new(audio: Array2<f32>, visual: Array4<f32>, clip_ids: Vec<String>, pairs: Vec<Pair>) -> Result<Self> {
        let batch = Self {
            audio,
            visual,
            clip_ids,
            pairs,
        };
        batch.validate()?;
        Ok(batch)
    }

    /// Pairs every item with itself and with one partner from a random
    /// derangement of the batch.
    pub fn with_derangement<R: Rng>(audio: Array2<f32>, visual: Array4<f32>, clip_ids: Vec<String>, rng: &mut R) -> Result<Self> {
        let n = clip_ids.len();
        if n < 2 {
            return Err(invalid!("derangement negatives need at least 2 clips, got {n}"));
        }
        Self::new(audio, visual, clip_ids, deranged_pairs(n, rng))
    }

    pub fn validate(&self) -> Result<()> {
        validate_pairs(self.audio.view(), self.visual.view(), &self.pairs)?;
        if self.clip_ids.len() != self.audio.nrows() {
            return Err(shape_err!("{} clip ids for batch of {}", self.clip_ids.len(), self.audio.nrows()));
        }
        for p in &self.pairs {
            let same = self.clip_ids[p.audio] == self.clip_ids[p.visual];
            if same != p.matched {
                return Err(invalid!(
                    "pair ({}, {}) labelled matched={} but clips `{}` / `{}`",
                    p.audio,
                    p.visual,
                    p.matched,
                    self.clip_ids[p.audio],
                    self.clip_ids[p.visual]
                ));
            }
        }
        Ok(())
    }
}

fn validate_pairs<F>(audio: ArrayView2<F>, visual: ArrayView4<F>, pairs: &[Pair]) -> Result<()> {
    let b = audio.nrows();
    if b == 0 || pairs.is_empty() {
        return Err(invalid!("empty pair batch"));
    }
    if visual.dim().0 != b {
        return Err(shape_err!("{} audio embeddings, {} visual maps", b, visual.dim().0));
    }
    if audio.ncols() != visual.dim().1 {
        return Err(shape_err!("audio has {} channels, visual {}", audio.ncols(), visual.dim().1));
    }
    if pairs.iter().any(|p| p.audio >= b || p.visual >= b) {
        return Err(invalid!("pair index outside batch of {b}"));
    }
    if !pairs.iter().any(|p| p.matched) || pairs.iter().all(|p| p.matched) {
        return Err(invalid!("batch needs at least one matched and one mismatched pair"));
    }
    Ok(())
}

/// Uniform random cyclic permutation (Sattolo); no element maps to itself.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// `(i, i)` positives followed by `(i, sigma(i))` negatives.
pub fn deranged_pairs<R: Rng>(n: usize, rng: &mut R) -> Vec<Pair> {
    let sigma = derangement(n, rng);
    let mut pairs: Vec<Pair> = (0..n).map(|i| Pair { audio: i, visual: i, matched: true }).collect();
    pairs.extend(sigma.iter().enumerate().map(|(i, &j)| Pair {
        audio: i,
        visual: j,
        matched: false,
    }));
    pairs
}

/// Binary cross-entropy of the map maximum against the match label.
pub fn gmp_bce<F: NdFloat>(map: ArrayView2<F>, matched: bool) -> F {
    let eps = cast::<F>(1e-12);
    let p = map.iter().copied().fold(F::neg_infinity(), F::max);
    if matched {
        -(p.max(eps)).ln()
    } else {
        -((F::one() - p).max(eps)).ln()
    }
}

#[derive(Debug, Clone)]
pub struct LocLoss<F> {
    pub loss: F,
    /// Map maximum of every pair.
    pub scores: Vec<F>,
    pub grad_weight: F,
    pub grad_bias: F,
    pub grad_audio: Array2<F>,
    pub grad_visual: Array4<F>,
}

/// Adds `dcos * d cos(g, f_col) / d(g, f_col)` into the two gradient buffers.
pub(crate) fn cosine_backward<F: NdFloat>(
    g: ArrayView1<F>,
    col: ArrayView1<F>,
    dcos: F,
    mut dg: ndarray::ArrayViewMut1<F>,
    mut dcol: ndarray::ArrayViewMut1<F>,
) {
    let floor = cast::<F>(NORM_FLOOR);
    let gn = norm(g);
    let fnorm = norm(col);
    if gn < floor || fnorm < floor || dcos == F::zero() {
        return;
    }
    let cos = g.dot(&col) / (gn * fnorm);
    let inv = F::one() / (gn * fnorm);
    for c in 0..g.len() {
        dg[c] += dcos * (col[c] * inv - cos * g[c] / (gn * gn));
        dcol[c] += dcos * (g[c] * inv - cos * col[c] / (fnorm * fnorm));
    }
}

/// Mean over pairs of `BCE(matched, max_hw sigmoid(w cos + b))`, with
/// gradients for every input.
pub fn loc_loss_with_grad<F: NdFloat>(
    audio: ArrayView2<F>,
    visual: ArrayView4<F>,
    pairs: &[Pair],
    weight: F,
    bias: F,
) -> Result<LocLoss<F>> {
    validate_pairs(audio, visual, pairs)?;
    let n = cast::<F>(pairs.len() as f64);
    let mut out = LocLoss {
        loss: F::zero(),
        scores: Vec::with_capacity(pairs.len()),
        grad_weight: F::zero(),
        grad_bias: F::zero(),
        grad_audio: Array2::zeros(audio.raw_dim()),
        grad_visual: Array4::zeros(visual.raw_dim()),
    };
    for p in pairs {
        let g = audio.row(p.audio);
        let f = visual.index_axis(Axis(0), p.visual);
        let cos = cosine_map(g, f);
        let ((mi, mj), &c) = cos
            .indexed_iter()
            .fold(None::<((usize, usize), &F)>, |best, (idx, v)| match best {
                Some((_, b)) if weight * *b + bias >= weight * *v + bias => best,
                _ => Some((idx, v)),
            })
            .expect("non-empty map");
        let z = weight * c + bias;
        let y = if p.matched { F::one() } else { F::zero() };
        out.loss += (softplus(z) - y * z) / n;
        out.scores.push(sigmoid(z));
        let dz = (sigmoid(z) - y) / n;
        out.grad_weight += dz * c;
        out.grad_bias += dz;
        let dg = out.grad_audio.row_mut(p.audio);
        let dcol = out.grad_visual.slice_mut(s![p.visual, .., mi, mj]);
        cosine_backward(g, f.slice(s![.., mi, mj]), dz * weight, dg, dcol);
    }
    Ok(out)
}

pub fn loc_loss<F: NdFloat>(audio: ArrayView2<F>, visual: ArrayView4<F>, pairs: &[Pair], weight: F, bias: F) -> Result<F> {
    Ok(loc_loss_with_grad(audio, visual, pairs, weight, bias)?.loss)
}

impl PairBatch {
    pub fn loc_loss(&self, weight: f32, bias: f32) -> Result<f32> {
        self.validate()?;
        loc_loss(self.audio.view(), self.visual.view(), &self.pairs, weight, bias)
    }
}

/// A pooled object feature for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRepresentation {
    pub clip_id: String,
    pub values: Array1<f32>,
    pub pseudo_label: Option<usize>,
}

/// Feature columns weighted by the localization map where it reaches
/// `threshold`; an empty mask falls back to the raw map, and an all-zero
/// map to the plain spatial mean.
pub fn extract_object_representation<F: NdFloat>(f: ArrayView3<F>, l: ArrayView2<F>, threshold: F) -> Result<Array1<F>> {
    let (c, h, w) = f.dim();
    if l.dim() != (h, w) {
        return Err(shape_err!("map {:?} vs feature grid {:?}", l.dim(), (h, w)));
    }
    if !(threshold > F::zero() && threshold < F::one()) {
        return Err(invalid!("binarize threshold must lie in (0, 1)"));
    }
    let masked = l.mapv(|v| if v >= threshold { v } else { F::zero() });
    let weights = if masked.sum() > F::zero() {
        masked
    } else if l.sum() > F::zero() {
        l.to_owned()
    } else {
        Array2::from_elem((h, w), F::one())
    };
    let total = weights.sum();
    let mut o = Array1::zeros(c);
    for ((i, j), &wt) in weights.indexed_iter() {
        if wt != F::zero() {
            o.scaled_add(wt / total, &f.slice(s![.., i, j]));
        }
    }
    Ok(o)
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<F: NdFloat>(logits: ArrayView2<F>, labels: &[usize]) -> Result<(F, Array2<F>)> {
    let (b, k) = logits.dim();
    if b == 0 || labels.len() != b {
        return Err(shape_err!("{} labels for {} logit rows", labels.len(), b));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(invalid!("label {bad} outside [0, {k})"));
    }
    let n = cast::<F>(b as f64);
    let mut loss = F::zero();
    let mut grad = Array2::zeros((b, k));
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        loss -= log_softmax(row)[y] / n;
        let mut g = softmax(row);
        g[y] -= F::one();
        grad.row_mut(i).assign(&(g / n));
    }
    Ok((loss, grad))
}

/// `CE(h_a) + CE(h_v)` against shared labels, with the two logit gradients.
pub fn classification_loss<F: NdFloat>(
    logits_a: ArrayView2<F>,
    logits_v: ArrayView2<F>,
    labels: &[usize],
) -> Result<(F, Array2<F>, Array2<F>)> {
    let (la, ga) = cross_entropy(logits_a, labels)?;
    let (lv, gv) = cross_entropy(logits_v, labels)?;
    Ok((la + lv, ga, gv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionSource {
    /// Cluster indices from the dictionary.
    #[default]
    Pseudo,
    /// Annotated sound labels.
    OracleA,
    /// Annotated object labels.
    OracleV,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Localization, clustering and classification repeated per alternation.
    #[default]
    Alternating,
    /// All localization epochs, one clustering, then all classification epochs.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub lr: f32,
    /// Learning-rate multiplier for the scalar weight and bias of the
    /// localization head.
    pub loc_lr_scale: f32,
    pub batch_size: usize,
    pub alternations: usize,
    pub loc_epochs: usize,
    pub cls_epochs: usize,
    pub schedule: Schedule,
    /// Cap on optimizer steps over both phases; `None` runs the full schedule.
    pub max_steps: Option<usize>,
    pub binarize_threshold: f32,
    pub supervision: SupervisionSource,
    pub kmeans: KMeansOptions,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            loc_lr_scale: 100.0,
            batch_size: 16,
            alternations: 4,
            loc_epochs: 1,
            cls_epochs: 1,
            schedule: Schedule::Alternating,
            max_steps: None,
            binarize_threshold: 0.05,
            supervision: SupervisionSource::Pseudo,
            kmeans: KMeansOptions::default(),
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.loc_lr_scale > 0.0) {
            return Err(invalid!("learning rate and its scale must be positive"));
        }
        if self.batch_size < 2 {
            return Err(invalid!("batch size must be at least 2"));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(invalid!("binarize threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Localization,
    Clustering,
    Classification,
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub phase: Phase,
    /// Clustering entries report the K-means inertia.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_accuracy: Option<f64>,
}

pub struct Stage1Output {
    pub model: Model,
    pub dictionary: ObjectDictionary,
    /// `N x C` final object representations in clip order.
    pub representations: Array2<f64>,
    pub log: Vec<LogEntry>,
}

pub(crate) fn stack_specs(clips: &[&LoadedClip]) -> Array3<f32> {
    let (t, m) = clips[0].spec.dim();
    let mut out = Array3::zeros((clips.len(), t, m));
    for (i, c) in clips.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&c.spec);
    }
    out
}

pub(crate) fn stack_frames(clips: &[&LoadedClip]) -> Array4<f32> {
    let (ch, h, w) = clips[0].frame.dim();
    let mut out = Array4::zeros((clips.len(), ch, h, w));
    for (i, c) in clips.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&c.frame);
    }
    out
}

pub(crate) const EVAL_CHUNK: usize = 32;

/// Encodes clips in chunks: `(N x C audio, N x C x h x w visual)`.
pub fn encode_clips(model: &Model, clips: &[LoadedClip]) -> Result<(Array2<f32>, Array4<f32>)> {
    if clips.is_empty() {
        return Err(invalid!("no clips to encode"));
    }
    let mut audio = Vec::new();
    let mut visual = Vec::new();
    for chunk in clips.chunks(EVAL_CHUNK) {
        let refs: Vec<&LoadedClip> = chunk.iter().collect();
        audio.push(model.audio_forward(stack_specs(&refs).view())?.0);
        visual.push(model.visual_forward(stack_frames(&refs).view())?.0);
    }
    let a: Vec<_> = audio.iter().map(|x| x.view()).collect();
    let v: Vec<_> = visual.iter().map(|x| x.view()).collect();
    Ok((
        ndarray::concatenate(Axis(0), &a).unwrap(),
        ndarray::concatenate(Axis(0), &v).unwrap(),
    ))
}

/// Object representation of every clip from its own matched map.
pub fn compute_representations(model: &Model, clips: &[LoadedClip], threshold: f32) -> Result<Array2<f64>> {
    let (audio, visual) = encode_clips(model, clips)?;
    let (w, b) = (model.loc_weight(), model.loc_bias());
    let mut reps = Array2::zeros((clips.len(), model.config.channels));
    for i in 0..clips.len() {
        let f = visual.index_axis(Axis(0), i);
        let l = crate::model::localization_map(audio.row(i), f, w, b);
        let o = extract_object_representation(f, l.view(), threshold)?;
        reps.row_mut(i).assign(&o.mapv(|v| v as f64));
    }
    Ok(reps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Matched pairs scored at or above 0.5.
    pub true_positives: usize,
    /// Mismatched pairs scored below 0.5.
    pub true_negatives: usize,
}

/// Matched-vs-mismatched accuracy at map-maximum 0.5. Every clip is paired
/// with itself and with one random clip of a different category (or, for
/// unlabelled clips, a different clip).
pub fn evaluate_pairs(model: &Model, clips: &[LoadedClip], seed: u64) -> Result<PairEval> {
    if clips.len() < 2 {
        return Err(invalid!("pair evaluation needs at least 2 clips"));
    }
    let (audio, visual) = encode_clips(model, clips)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, b) = (model.loc_weight(), model.loc_bias());
    let score = |a: usize, v: usize| {
        crate::model::localization_map(audio.row(a), visual.index_axis(Axis(0), v), w, b)
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    };
    let (mut tp, mut tn, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..clips.len() {
        pos += 1;
        tp += (score(i, i) >= 0.5) as usize;
        let ci = clips[i].record.category;
        let candidates: Vec<usize> = (0..clips.len())
            .filter(|&j| j != i && (ci.is_none() || clips[j].record.category != ci))
            .collect();
        if let Some(&j) = candidates.choose(&mut rng) {
            neg += 1;
            tn += (score(i, j) < 0.5) as usize;
        }
    }
    Ok(PairEval {
        accuracy: (tp + tn) as f64 / (pos + neg) as f64,
        positives: pos,
        negatives: neg,
        true_positives: tp,
        true_negatives: tn,
    })
}

fn oracle_labels(clips: &[LoadedClip], source: SupervisionSource, k: usize) -> Result<Vec<usize>> {
    clips
        .iter()
        .map(|c| {
            let label = match source {
                SupervisionSource::OracleA => c.record.sound_label(),
                _ => c.record.category,
            };
            match label {
                Some(l) if l < k => Ok(l),
                Some(l) => Err(invalid!("label {l} of `{}` does not fit K = {k}", c.record.clip_id)),
                None => Err(invalid!("oracle supervision needs a label for `{}`", c.record.clip_id)),
            }
        })
        .collect()
}

/// Clusters the current object representations. Pseudo supervision starts
/// from k-means++ the first time and from the previous keys afterwards, so
/// cluster indices keep their meaning for the classification heads.
pub fn cluster_step(
    model: &Model,
    clips: &[LoadedClip],
    cfg: &Stage1Config,
    previous: Option<&ObjectDictionary>,
) -> Result<(ObjectDictionary, Array2<f64>)> {
    let reps = compute_representations(model, clips, cfg.binarize_threshold)?;
    let ids: Vec<String> = clips.iter().map(|c| c.record.clip_id.clone()).collect();
    let k = model.config.clusters;
    let dict = match cfg.supervision {
        SupervisionSource::Pseudo => match previous {
            None => fit_dictionary(reps.view(), &ids, k, cfg.seed, &cfg.kmeans)?.0,
            Some(prev) => refine_dictionary(reps.view(), &ids, prev.keys.view(), cfg.seed, &cfg.kmeans)?.0,
        },
        source => dictionary_from_labels(reps.view(), &ids, &oracle_labels(clips, source, k)?, k, cfg.seed)?,
    };
    Ok((dict, reps))
}

/// Learning-rate multiplier of each parameter during `phase`; `None` freezes it.
pub(crate) fn phase_scale(phase: Phase, loc_lr_scale: f32) -> impl Fn(&str) -> Option<f32> {
    move |name: &str| {
        let shared = name.starts_with(groups::VISUAL) || name.starts_with(groups::AUDIO);
        let loc = name.starts_with(groups::LOC);
        let heads = name.starts_with(groups::HEAD_A) || name.starts_with(groups::HEAD_V);
        match phase {
            Phase::Localization if loc => Some(loc_lr_scale),
            Phase::Localization if shared => Some(1.0),
            Phase::Classification if shared || heads => Some(1.0),
            Phase::Stage2 if loc => Some(loc_lr_scale),
            Phase::Stage2 if shared || name.starts_with(groups::HEAD_A) => Some(1.0),
            _ => None,
        }
    }
}

/// One localization step on a batch of single-source clips.
pub fn localization_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&LoadedClip],
    loc_lr_scale: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, f64)> {
    let (audio, acache) = model.audio_forward(stack_specs(batch).view())?;
    let (visual, vcache) = model.visual_forward(stack_frames(batch).view())?;
    let pairs = deranged_pairs(batch.len(), rng);
    let out = loc_loss_with_grad(audio.view(), visual.view(), &pairs, model.loc_weight(), model.loc_bias())?;
    let mut grads = model.params.zeros_like();
    grads.accumulate_scalar(LOC_WEIGHT, out.grad_weight);
    grads.accumulate_scalar(LOC_BIAS, out.grad_bias);
    model.audio_backward(&acache, out.grad_audio.view(), &mut grads);
    model.visual_backward(&vcache, out.grad_visual.view(), &mut grads);
    adam.step_scaled(&mut model.params, &grads, phase_scale(Phase::Localization, loc_lr_scale));
    let correct = pairs
        .iter()
        .zip(&out.scores)
        .filter(|(p, &s)| (s >= 0.5) == p.matched)
        .count();
    Ok((out.loss, correct as f64 / pairs.len() as f64))
}

/// One pseudo-label classification step.
pub fn classification_step(model: &mut Model, adam: &mut Adam, batch: &[&LoadedClip], labels: &[usize]) -> Result<f32> {
    let (audio, acache) = model.audio_forward(stack_specs(batch).view())?;
    let (visual, vcache) = model.visual_forward(stack_frames(batch).view())?;
    let (la, hacache) = model.head_a_forward(audio.view());
    let (lv, hvcache) = model.head_v_forward(visual.view());
    let (loss, ga, gv) = classification_loss(la.view(), lv.view(), labels)?;
    let mut grads = model.params.zeros_like();
    let demb = model.head_a_backward(&hacache, ga.view(), &mut grads);
    let dfeat = model.head_v_backward(&hvcache, gv.view(), &mut grads);
    model.audio_backward(&acache, demb.view(), &mut grads);
    model.visual_backward(&vcache, dfeat.view(), &mut grads);
    adam.step_scaled(&mut model.params, &grads, phase_scale(Phase::Classification, 1.0));
    model.heads_trained = true;
    Ok(loss)
}

pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Stage-one training over single-source clips. Returns the trained model,
/// the final dictionary (with a category assignment when every clip carries
/// an object label) and the object representations it was fitted on.
pub fn train_stage1(mut model: Model, clips: &[LoadedClip], cfg: &Stage1Config) -> Result<Stage1Output> {
    cfg.validate()?;
    let k = model.config.clusters;
    if clips.len() < k.max(2) {
        return Err(invalid!("{} clips cannot fill K = {k} clusters", clips.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Each phase keeps its own moment estimates.
    let mut loc_adam = Adam::new(cfg.lr);
    let mut cls_adam = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut dict: Option<ObjectDictionary> = None;

    let rounds: Vec<(usize, usize)> = match cfg.schedule {
        Schedule::Alternating => vec![(cfg.loc_epochs, cfg.cls_epochs); cfg.alternations],
        Schedule::Sequential if cfg.alternations > 0 => {
            vec![(cfg.loc_epochs * cfg.alternations, cfg.cls_epochs * cfg.alternations)]
        }
        Schedule::Sequential => vec![],
    };

    let capped = |step: usize| cfg.max_steps.is_some_and(|m| step >= m);
    for (loc_epochs, cls_epochs) in rounds {
        for _ in 0..loc_epochs {
            for idx in epoch_batches(clips.len(), cfg.batch_size, &mut rng) {
                if capped(step) {
                    break;
                }
                let batch: Vec<&LoadedClip> = idx.iter().map(|&i| &clips[i]).collect();
                let (loss, acc) = localization_step(&mut model, &mut loc_adam, &batch, cfg.loc_lr_scale, &mut rng)?;
                step += 1;
                log.push(LogEntry {
                    step,
                    phase: Phase::Localization,
                    loss: loss as f64,
                    pair_accuracy: Some(acc),
                });
            }
        }

        let (d, _) = cluster_step(&model, clips, cfg, dict.as_ref())?;
        log.push(LogEntry {
            step,
            phase: Phase::Clustering,
            loss: d.inertia,
            pair_accuracy: None,
        });
        dict = Some(d);
        let labels = &dict.as_ref().unwrap().assignments;

        for _ in 0..cls_epochs {
            for idx in epoch_batches(clips.len(), cfg.batch_size, &mut rng) {
                if capped(step) {
                    break;
                }
                let batch: Vec<&LoadedClip> = idx.iter().map(|&i| &clips[i]).collect();
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let loss = classification_step(&mut model, &mut cls_adam, &batch, &y)?;
                step += 1;
                log.push(LogEntry {
                    step,
                    phase: Phase::Classification,
                    loss: loss as f64,
                    pair_accuracy: None,
                });
            }
        }
    }

    let (mut dictionary, representations) = cluster_step(&model, clips, cfg, dict.as_ref())?;
    log.push(LogEntry {
        step,
        phase: Phase::Clustering,
        loss: dictionary.inertia,
        pair_accuracy: None,
    });
    if clips.iter().all(|c| c.record.category.is_some()) {
        let labels = clips
            .iter()
            .map(|c| (c.record.clip_id.clone(), c.record.category.unwrap()))
            .collect();
        dictionary.categories = Some(assign_categories(
            &dictionary,
            &labels,
            model.config.num_categories,
            DEFAULT_ENUMERATION_CAP,
        )?);
    }
    if step > 0 {
        model.stage = StageTag::Stage1;
    }
    Ok(Stage1Output {
        model,
        dictionary,
        representations,
        log,
    })
}

/// Nearest-key cluster of each representation.
pub fn nearest_keys(reps: ArrayView2<f64>, keys: ArrayView2<f64>) -> Vec<usize> {
    reps.rows()
        .into_iter()
        .map(|r| {
            keys.rows()
                .into_iter()
                .enumerate()
                .map(|(k, key)| (k, (&r - &key).mapv(|v| v * v).sum()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap()
        })
        .collect()
}

/// Trainable parameter snapshot used to check that non-gradient phases leave
/// weights untouched.
pub fn snapshot(params: &ParamStore) -> Vec<(String, Vec<f32>)> {
    params
        .iter()
        .map(|(n, t)| (n.clone(), t.iter().copied().collect()))
        .collect()
}
