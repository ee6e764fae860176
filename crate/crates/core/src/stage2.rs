//! Stage two: class-aware maps from the frozen dictionary, silent-object
//! filtering by the localization map, and audio/visual distribution matching.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LoadedClip;
use crate::dictionary::{category_activation, CategoryAssignment, ObjectDictionary};
use crate::error::{invalid, shape_err, Error, Result};
use crate::math::{cast, softmax};
use crate::model::{cosine_map, localization_map, Model, StageTag, LOC_BIAS, LOC_WEIGHT};
use crate::nn::Adam;
use crate::stage1::{
    cosine_backward, deranged_pairs, loc_loss_with_grad, phase_scale, stack_frames, stack_specs, LogEntry, Pair, Phase,
    EVAL_CHUNK,
};

/// Floor applied to the audio distribution inside the divergence.
pub const PA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Visual,
    Audio,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryDistribution {
    pub probs: Array1<f64>,
    pub kind: DistributionKind,
}

impl CategoryDistribution {
    pub fn new(probs: Array1<f64>, kind: DistributionKind) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(invalid!("distribution has a negative or NaN entry"));
        }
        if (probs.sum() - 1.0).abs() > 1e-6 {
            return Err(invalid!("distribution sums to {}", probs.sum()));
        }
        Ok(Self { probs, kind })
    }
}

/// `m^k(h, w) = d^k . f(:, h, w)` for every key row of `keys`.
pub fn category_maps<F: NdFloat>(f: ArrayView3<F>, keys: ArrayView2<F>) -> Result<Array3<F>> {
    let (c, h, w) = f.dim();
    if keys.ncols() != c {
        return Err(shape_err!("keys of length {} vs {c} feature channels", keys.ncols()));
    }
    let flat = f.to_shape((c, h * w)).unwrap();
    let m = keys.dot(&flat);
    Ok(m.into_shape_with_order((keys.nrows(), h, w)).unwrap())
}

/// Hadamard product of every map with `l`.
pub fn suppress_silent<F: NdFloat>(m: ArrayView3<F>, l: ArrayView2<F>) -> Result<Array3<F>> {
    let (_, h, w) = m.dim();
    if l.dim() != (h, w) {
        return Err(shape_err!("filter {:?} vs maps {:?}", l.dim(), (h, w)));
    }
    Ok(&m * &l.insert_axis(Axis(0)))
}

fn gap_logits<F: NdFloat>(s: ArrayView3<F>) -> Array1<F> {
    let (k, h, w) = s.dim();
    let area = cast::<F>((h * w) as f64);
    Array1::from_shape_fn(k, |i| s.index_axis(Axis(0), i).sum() / area)
}

/// Softmax over the global average of each map.
pub fn visual_distribution<F: NdFloat>(s: ArrayView3<F>) -> Result<Array1<F>> {
    if s.dim().0 < 2 {
        return Err(invalid!("need at least 2 maps, got {}", s.dim().0));
    }
    Ok(softmax(gap_logits(s).view()))
}

/// `softmax(h_a(g))`; the head must have been trained in stage one.
pub fn audio_distribution(model: &Model, g: ArrayView1<f32>) -> Result<Array1<f32>> {
    if !model.heads_trained {
        return Err(Error::Untrained(
            "the audio classification head has not been trained; run stage one first".into(),
        ));
    }
    if g.len() != model.config.channels {
        return Err(shape_err!("embedding of length {} vs {} channels", g.len(), model.config.channels));
    }
    let (logits, _) = model.head_a_forward(g.insert_axis(Axis(0)));
    Ok(softmax(logits.row(0)))
}

/// `KL(pv || pa)` with `0 ln 0 = 0` and `pa` floored.
pub fn consistency_loss<F: NdFloat>(pv: ArrayView1<F>, pa: ArrayView1<F>) -> F {
    let floor = cast::<F>(PA_FLOOR);
    pv.iter()
        .zip(pa)
        .filter(|(&p, _)| p > F::zero())
        .map(|(&p, &q)| p * (p / q.max(floor)).ln())
        .fold(F::zero(), |a, b| a + b)
}

/// Gradients of the divergence w.r.t. the visual logits (inputs of the `pv`
/// softmax) and the audio logits.
pub fn consistency_grad<F: NdFloat>(pv: ArrayView1<F>, pa: ArrayView1<F>) -> (Array1<F>, Array1<F>) {
    let floor = cast::<F>(PA_FLOOR);
    let u = Array1::from_shape_fn(pv.len(), |k| {
        if pv[k] > F::zero() {
            (pv[k] / pa[k].max(floor)).ln()
        } else {
            F::zero()
        }
    });
    let mean_u = pv.dot(&u);
    let dz = Array1::from_shape_fn(pv.len(), |k| pv[k] * (u[k] - mean_u));
    let t = Array1::from_shape_fn(pa.len(), |k| if pa[k] > floor { -pv[k] / pa[k] } else { F::zero() });
    let mean_t = pa.dot(&t);
    let dy = Array1::from_shape_fn(pa.len(), |k| pa[k] * (t[k] - mean_t));
    (dz, dy)
}

/// Per-cell softmax across maps, after summing clusters into categories when
/// an assignment is given.
pub fn infer_class_maps<F: NdFloat>(s: ArrayView3<F>, assignment: Option<&CategoryAssignment>) -> Result<Array3<F>> {
    let summed;
    let maps = match assignment {
        Some(a) => {
            summed = category_activation(s, a)?;
            summed.view()
        }
        None => s,
    };
    let (k, h, w) = maps.dim();
    if k < 2 {
        return Err(invalid!("need at least 2 maps, got {k}"));
    }
    let mut out = Array3::zeros((k, h, w));
    for i in 0..h {
        for j in 0..w {
            out.slice_mut(s![.., i, j]).assign(&softmax(maps.slice(s![.., i, j])));
        }
    }
    Ok(out)
}

/// Which terms of the stage-two objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Flags {
    pub use_loc: bool,
    /// Filter the category maps by the localization map.
    pub use_prod: bool,
    pub use_consistency: bool,
}

impl Default for Stage2Flags {
    fn default() -> Self {
        Self {
            use_loc: true,
            use_prod: true,
            use_consistency: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Loss<F> {
    pub loss: F,
    pub consistency: F,
    pub loc: F,
    /// `B x K` visual distributions.
    pub pv: Array2<F>,
    pub grad_audio: Array2<F>,
    pub grad_visual: Array4<F>,
    pub grad_logits_a: Array2<F>,
    pub grad_weight: F,
    pub grad_bias: F,
}

/// Per-sample maps used by the divergence: `s = m . l`, or `m` without the filter.
fn filtered_maps<F: NdFloat>(
    g: ArrayView1<F>,
    f: ArrayView3<F>,
    keys: ArrayView2<F>,
    weight: F,
    bias: F,
    use_prod: bool,
) -> Result<(Array3<F>, Array3<F>, Array2<F>)> {
    let m = category_maps(f, keys)?;
    let l = localization_map(g, f, weight, bias);
    let s = if use_prod { suppress_silent(m.view(), l.view())? } else { m.clone() };
    Ok((m, s, l))
}

/// `L_c + lambda L_loc` over a batch of multi-source clips with gradients.
/// `logits_a` are the audio head outputs for `audio`; `pairs` feed the
/// localization term.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss_with_grad<F: NdFloat>(
    audio: ArrayView2<F>,
    visual: ArrayView4<F>,
    logits_a: ArrayView2<F>,
    keys: ArrayView2<F>,
    pairs: &[Pair],
    weight: F,
    bias: F,
    lambda: F,
    flags: Stage2Flags,
) -> Result<Stage2Loss<F>> {
    let (b, c, h, w) = visual.dim();
    let k = keys.nrows();
    if audio.dim() != (b, c) || logits_a.dim() != (b, k) {
        return Err(shape_err!(
            "audio {:?} and logits {:?} vs visual {:?} with {k} keys",
            audio.dim(),
            logits_a.dim(),
            visual.dim()
        ));
    }
    if b == 0 {
        return Err(invalid!("empty batch"));
    }
    if !(lambda >= F::zero()) {
        return Err(invalid!("lambda must be non-negative"));
    }
    let mut out = Stage2Loss {
        loss: F::zero(),
        consistency: F::zero(),
        loc: F::zero(),
        pv: Array2::zeros((b, k)),
        grad_audio: Array2::zeros((b, c)),
        grad_visual: Array4::zeros((b, c, h, w)),
        grad_logits_a: Array2::zeros((b, k)),
        grad_weight: F::zero(),
        grad_bias: F::zero(),
    };
    let n = cast::<F>(b as f64);
    let area = cast::<F>((h * w) as f64);
    for i in 0..b {
        let g = audio.row(i);
        let f = visual.index_axis(Axis(0), i);
        let (m, s, l) = filtered_maps(g, f, keys, weight, bias, flags.use_prod)?;
        let pv = visual_distribution(s.view())?;
        out.pv.row_mut(i).assign(&pv);
        if !flags.use_consistency {
            continue;
        }
        let pa = softmax(logits_a.row(i));
        out.consistency += consistency_loss(pv.view(), pa.view()) / n;
        let (dz, dy) = consistency_grad(pv.view(), pa.view());
        out.grad_logits_a.row_mut(i).assign(&(dy / n));

        // d/ds^k is uniform over the grid.
        let ds = dz / (n * area);
        let mut dl = Array2::<F>::zeros((h, w));
        let mut dfeat = out.grad_visual.index_axis_mut(Axis(0), i);
        for kk in 0..k {
            let key = keys.row(kk);
            for y in 0..h {
                for x in 0..w {
                    let dm = if flags.use_prod {
                        dl[[y, x]] += ds[kk] * m[[kk, y, x]];
                        ds[kk] * l[[y, x]]
                    } else {
                        ds[kk]
                    };
                    dfeat.slice_mut(s![.., y, x]).scaled_add(dm, &key);
                }
            }
        }
        if flags.use_prod {
            let cos = cosine_map(g, f);
            for y in 0..h {
                for x in 0..w {
                    let lv = l[[y, x]];
                    let dzl = dl[[y, x]] * lv * (F::one() - lv);
                    out.grad_weight += dzl * cos[[y, x]];
                    out.grad_bias += dzl;
                    cosine_backward(
                        g,
                        f.slice(s![.., y, x]),
                        dzl * weight,
                        out.grad_audio.row_mut(i),
                        out.grad_visual.slice_mut(s![i, .., y, x]),
                    );
                }
            }
        }
    }
    out.loss = out.consistency;
    if flags.use_loc && lambda > F::zero() {
        let loc = loc_loss_with_grad(audio, visual, pairs, weight, bias)?;
        out.loc = loc.loss;
        out.loss += lambda * loc.loss;
        out.grad_weight += lambda * loc.grad_weight;
        out.grad_bias += lambda * loc.grad_bias;
        out.grad_audio.scaled_add(lambda, &loc.grad_audio);
        out.grad_visual.scaled_add(lambda, &loc.grad_visual);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn stage2_loss<F: NdFloat>(
    audio: ArrayView2<F>,
    visual: ArrayView4<F>,
    logits_a: ArrayView2<F>,
    keys: ArrayView2<F>,
    pairs: &[Pair],
    (weight, bias): (F, F),
    lambda: F,
    flags: Stage2Flags,
) -> Result<F> {
    Ok(stage2_loss_with_grad(audio, visual, logits_a, keys, pairs, weight, bias, lambda, flags)?.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub lr: f32,
    pub loc_lr_scale: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Cap on optimizer steps; `None` runs every epoch to completion.
    pub max_steps: Option<usize>,
    pub flags: Stage2Flags,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            loc_lr_scale: 100.0,
            batch_size: 16,
            epochs: 4,
            max_steps: None,
            flags: Stage2Flags::default(),
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.loc_lr_scale > 0.0) {
            return Err(invalid!("learning rate and its scale must be positive"));
        }
        if self.batch_size < 2 {
            return Err(invalid!("batch size must be at least 2"));
        }
        Ok(())
    }
}

pub struct Stage2Output {
    pub model: Model,
    pub log: Vec<LogEntry>,
}

/// One optimizer step on a batch of multi-source clips; the loss weight is
/// the model's `lambda`.
pub fn stage2_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&LoadedClip],
    keys: ArrayView2<f32>,
    cfg: &Stage2Config,
    rng: &mut ChaCha8Rng,
) -> Result<Stage2Loss<f32>> {
    let (audio, acache) = model.audio_forward(stack_specs(batch).view())?;
    let (visual, vcache) = model.visual_forward(stack_frames(batch).view())?;
    let (logits, hcache) = model.head_a_forward(audio.view());
    let pairs = deranged_pairs(batch.len(), rng);
    let out = stage2_loss_with_grad(
        audio.view(),
        visual.view(),
        logits.view(),
        keys,
        &pairs,
        model.loc_weight(),
        model.loc_bias(),
        model.config.lambda,
        cfg.flags,
    )?;
    let mut grads = model.params.zeros_like();
    grads.accumulate_scalar(LOC_WEIGHT, out.grad_weight);
    grads.accumulate_scalar(LOC_BIAS, out.grad_bias);
    let mut demb = model.head_a_backward(&hcache, out.grad_logits_a.view(), &mut grads);
    demb += &out.grad_audio;
    model.audio_backward(&acache, demb.view(), &mut grads);
    model.visual_backward(&vcache, out.grad_visual.view(), &mut grads);
    adam.step_scaled(&mut model.params, &grads, phase_scale(Phase::Stage2, cfg.loc_lr_scale));
    Ok(out)
}

/// Stage-two training over multi-source clips with the dictionary frozen.
pub fn train_stage2(
    mut model: Model,
    clips: &[LoadedClip],
    dictionary: Option<&ObjectDictionary>,
    cfg: &Stage2Config,
) -> Result<Stage2Output> {
    cfg.validate()?;
    let dict = dictionary.ok_or_else(|| invalid!("stage two needs the object dictionary from stage one"))?;
    if dict.dim() != model.config.channels || dict.k() != model.config.clusters {
        return Err(shape_err!(
            "dictionary {}x{} vs model K = {}, C = {}",
            dict.k(),
            dict.dim(),
            model.config.clusters,
            model.config.channels
        ));
    }
    if !model.heads_trained {
        return Err(Error::Untrained("stage two starts from a stage-one checkpoint".into()));
    }
    let keys = dict.keys_f32();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let mut step = 0usize;
    'outer: for _ in 0..cfg.epochs {
        for idx in crate::stage1::epoch_batches(clips.len(), cfg.batch_size, &mut rng) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let batch: Vec<&LoadedClip> = idx.iter().map(|&i| &clips[i]).collect();
            let out = stage2_step(&mut model, &mut adam, &batch, keys.view(), cfg, &mut rng)?;
            step += 1;
            log.push(LogEntry {
                step,
                phase: Phase::Stage2,
                loss: out.loss as f64,
                pair_accuracy: None,
            });
        }
    }
    if step > 0 {
        model.stage = StageTag::Stage2;
    }
    Ok(Stage2Output { model, log })
}

/// Everything inference produces for one clip.
#[derive(Debug, Clone)]
pub struct ClipMaps {
    /// `K x h x w` filtered cluster maps (unfiltered when `use_prod` is off).
    pub s: Array3<f32>,
    /// `N x h x w` per-cell category probabilities.
    pub class_maps: Array3<f32>,
    /// `N x h x w` filtered maps summed per category.
    pub category_s: Array3<f32>,
    pub l: Array2<f32>,
    /// Visual distribution over clusters.
    pub pv: Array1<f32>,
}

/// Runs the full inference path on every clip.
pub fn infer_clips(
    model: &Model,
    clips: &[LoadedClip],
    dict: &ObjectDictionary,
    use_prod: bool,
) -> Result<Vec<ClipMaps>> {
    let assignment = dict
        .categories
        .as_ref()
        .ok_or_else(|| invalid!("dictionary has no cluster-to-category assignment"))?;
    let keys = dict.keys_f32();
    let (w, b) = (model.loc_weight(), model.loc_bias());
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EVAL_CHUNK) {
        let refs: Vec<&LoadedClip> = chunk.iter().collect();
        let (audio, _) = model.audio_forward(stack_specs(&refs).view())?;
        let (visual, _) = model.visual_forward(stack_frames(&refs).view())?;
        for i in 0..refs.len() {
            let (_, s, l) = filtered_maps(audio.row(i), visual.index_axis(Axis(0), i), keys.view(), w, b, use_prod)?;
            out.push(ClipMaps {
                class_maps: infer_class_maps(s.view(), Some(assignment))?,
                category_s: category_activation(s.view(), assignment)?,
                pv: visual_distribution(s.view())?,
                s,
                l,
            });
        }
    }
    Ok(out)
}

/// Filtered maps of one encoded pair; exposed for single-input localization.
pub fn clip_maps(
    model: &Model,
    g: ArrayView1<f32>,
    f: ArrayView3<f32>,
    dict: &ObjectDictionary,
    use_prod: bool,
) -> Result<ClipMaps> {
    let assignment = dict
        .categories
        .as_ref()
        .ok_or_else(|| invalid!("dictionary has no cluster-to-category assignment"))?;
    let keys = dict.keys_f32();
    let (_, s, l) = filtered_maps(g, f, keys.view(), model.loc_weight(), model.loc_bias(), use_prod)?;
    Ok(ClipMaps {
        class_maps: infer_class_maps(s.view(), Some(assignment))?,
        category_s: category_activation(s.view(), assignment)?,
        pv: visual_distribution(s.view())?,
        s,
        l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::{prop_assert, proptest};
    use rand_distr::{Distribution, Normal};

    fn randn<D: ndarray::Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(seed: u64, shape: Sh) -> Array<f64, D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array::from_shape_simple_fn(shape, || normal.sample(&mut rng))
    }

    #[test]
    fn category_map_examples() {
        let d = array![[1.0, 1.0], [0.0, 0.0]];
        let f = Array3::from_shape_fn((2, 3, 3), |_| 1.0);
        let m = category_maps(f.view(), d.view()).unwrap();
        assert!(m.index_axis(Axis(0), 0).iter().all(|&v| v == 2.0));
        assert!(m.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));

        let f = randn(1, (3, 2, 2));
        let keys = randn(2, (2, 3));
        let m = category_maps(f.view(), keys.view()).unwrap();
        for k in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let want: f64 = (0..3).map(|c| keys[[k, c]] * f[[c, y, x]]).sum();
                    assert!((m[[k, y, x]] - want).abs() < 1e-12);
                }
            }
        }
        assert!(category_maps(f.view(), randn(3, (2, 4)).view()).is_err());
    }

    #[test]
    fn suppression_examples() {
        let m = randn(4, (3, 2, 2));
        let ones = Array2::ones((2, 2));
        assert_eq!(suppress_silent(m.view(), ones.view()).unwrap(), m);
        let zeros = Array2::zeros((2, 2));
        assert!(suppress_silent(m.view(), zeros.view()).unwrap().iter().all(|&v| v == 0.0));
        let mut delta = Array2::zeros((2, 2));
        delta[[1, 0]] = 0.3;
        let s = suppress_silent(m.view(), delta.view()).unwrap();
        for ((k, y, x), &v) in s.indexed_iter() {
            let want = if (y, x) == (1, 0) { m[[k, y, x]] * 0.3 } else { 0.0 };
            assert_eq!(v, want);
        }
        assert!(suppress_silent(m.view(), Array2::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn visual_distribution_examples() {
        let flat = Array3::from_elem((4, 2, 2), 0.7f64);
        assert!(visual_distribution(flat.view()).unwrap().iter().all(|&p| (p - 0.25).abs() < 1e-12));
        let mut s = Array3::zeros((2, 2, 2));
        s.index_axis_mut(Axis(0), 0).fill(1.0);
        let p = visual_distribution(s.view()).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        assert!(visual_distribution(Array3::<f64>::zeros((1, 2, 2)).view()).is_err());
    }

    #[test]
    fn consistency_examples() {
        let p = array![0.2, 0.3, 0.5];
        assert_eq!(consistency_loss(p.view(), p.view()), 0.0);
        let pv = array![1.0, 0.0];
        let pa = array![0.5, 0.5];
        assert!((consistency_loss(pv.view(), pa.view()) - 2f64.ln()).abs() < 1e-12);
        // Floor keeps a zero target finite.
        let pa = array![0.0, 1.0];
        let v = consistency_loss(pv.view(), pa.view());
        assert!((v - (1.0 / PA_FLOOR).ln()).abs() < 1e-9);
    }

    #[test]
    fn class_map_examples() {
        let same = Array3::from_elem((3, 2, 2), -1.5f64);
        let out = infer_class_maps(same.view(), None).unwrap();
        assert!(out.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        let mut s = Array3::<f64>::zeros((2, 1, 1));
        s[[0, 0, 0]] = 2.0;
        let out = infer_class_maps(s.view(), None).unwrap();
        assert!((out[[0, 0, 0]] - 0.8808).abs() < 1e-4);
        assert!((out[[1, 0, 0]] - 0.1192).abs() < 1e-4);

        // Clusters 0 and 2 share category 1: sum first, then softmax.
        let s = randn(5, (3, 2, 2));
        let a = CategoryAssignment {
            map: vec![1, 0, 1],
            purity: 0.0,
            num_categories: 2,
        };
        let out = infer_class_maps(s.view(), Some(&a)).unwrap();
        let z1 = s[[0, 1, 1]] + s[[2, 1, 1]];
        let z0 = s[[1, 1, 1]];
        assert!((out[[1, 1, 1]] - z1.exp() / (z0.exp() + z1.exp())).abs() < 1e-12);
    }

    #[test]
    fn lambda_weighting() {
        let (audio, visual) = (randn(6, (2, 3)), randn(7, (2, 3, 2, 2)));
        let logits = randn(8, (2, 2));
        let keys = randn(9, (2, 3));
        let pairs = crate::stage1::deranged_pairs(2, &mut ChaCha8Rng::seed_from_u64(0));
        let flags = Stage2Flags::default();
        let full = stage2_loss_with_grad(audio.view(), visual.view(), logits.view(), keys.view(), &pairs, 1.3, -0.2, 0.5, flags)
            .unwrap();
        assert!((full.loss - (full.consistency + 0.5 * full.loc)).abs() < 1e-12);
        let zero = stage2_loss(audio.view(), visual.view(), logits.view(), keys.view(), &pairs, (1.3, -0.2), 0.0, flags).unwrap();
        assert!((zero - full.consistency).abs() < 1e-12);
    }

    #[test]
    fn without_prod_the_filter_is_ignored() {
        let (audio, visual) = (randn(10, (2, 3)), randn(11, (2, 3, 2, 2)));
        let logits = randn(12, (2, 2));
        let keys = randn(13, (2, 3));
        let flags = Stage2Flags {
            use_loc: false,
            use_prod: false,
            use_consistency: true,
        };
        // A huge negative bias drives l to 0; the loss must not notice.
        let a = stage2_loss(audio.view(), visual.view(), logits.view(), keys.view(), &[], (1.0, 0.0), 0.5, flags).unwrap();
        let b = stage2_loss(audio.view(), visual.view(), logits.view(), keys.view(), &[], (1.0, -800.0), 0.5, flags).unwrap();
        assert_eq!(a, b);
        let with_prod = Stage2Flags { use_prod: true, ..flags };
        let c = stage2_loss(audio.view(), visual.view(), logits.view(), keys.view(), &[], (1.0, -800.0), 0.5, with_prod).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn all_flag_combinations_run() {
        let (audio, visual) = (randn(14, (3, 3)), randn(15, (3, 3, 2, 2)));
        let logits = randn(16, (3, 2));
        let keys = randn(17, (2, 3));
        let pairs = crate::stage1::deranged_pairs(3, &mut ChaCha8Rng::seed_from_u64(1));
        for bits in 0..8u8 {
            let flags = Stage2Flags {
                use_loc: bits & 1 != 0,
                use_prod: bits & 2 != 0,
                use_consistency: bits & 4 != 0,
            };
            let out = stage2_loss_with_grad(audio.view(), visual.view(), logits.view(), keys.view(), &pairs, 1.0, 0.0, 0.5, flags)
                .unwrap();
            assert!(out.loss.is_finite() && out.loss >= 0.0);
            if !flags.use_loc && !flags.use_consistency {
                assert_eq!(out.loss, 0.0);
            }
        }
    }

    fn fd_check(flags: Stage2Flags, seed: u64) {
        let audio = randn(seed, (2, 3));
        let visual = randn(seed + 1, (2, 3, 2, 2));
        let logits = randn(seed + 2, (2, 2));
        let keys = randn(seed + 3, (2, 3));
        let pairs = crate::stage1::deranged_pairs(2, &mut ChaCha8Rng::seed_from_u64(seed));
        let (w, b, lambda) = (1.7, -0.3, 0.5);
        let loss = |a: &Array2<f64>, v: &Array4<f64>, lg: &Array2<f64>, w: f64, b: f64| {
            stage2_loss(a.view(), v.view(), lg.view(), keys.view(), &pairs, (w, b), lambda, flags).unwrap()
        };
        let out = stage2_loss_with_grad(audio.view(), visual.view(), logits.view(), keys.view(), &pairs, w, b, lambda, flags)
            .unwrap();
        let h = 1e-6;
        let check = |analytic: f64, numeric: f64| {
            let scale = analytic.abs().max(numeric.abs()).max(1e-4);
            assert!((analytic - numeric).abs() / scale < 1e-3, "{analytic} vs {numeric} ({flags:?})");
        };
        for idx in 0..audio.len() {
            let (mut p, mut m) = (audio.clone(), audio.clone());
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&p, &visual, &logits, w, b) - loss(&m, &visual, &logits, w, b)) / (2.0 * h);
            check(out.grad_audio.as_slice().unwrap()[idx], num);
        }
        for idx in 0..visual.len() {
            let (mut p, mut m) = (visual.clone(), visual.clone());
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&audio, &p, &logits, w, b) - loss(&audio, &m, &logits, w, b)) / (2.0 * h);
            check(out.grad_visual.as_slice().unwrap()[idx], num);
        }
        for idx in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&audio, &visual, &p, w, b) - loss(&audio, &visual, &m, w, b)) / (2.0 * h);
            check(out.grad_logits_a.as_slice().unwrap()[idx], num);
        }
        let num_w = (loss(&audio, &visual, &logits, w + h, b) - loss(&audio, &visual, &logits, w - h, b)) / (2.0 * h);
        check(out.grad_weight, num_w);
        let num_b = (loss(&audio, &visual, &logits, w, b + h) - loss(&audio, &visual, &logits, w, b - h)) / (2.0 * h);
        check(out.grad_bias, num_b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for bits in 0..8u8 {
            let flags = Stage2Flags {
                use_loc: bits & 1 != 0,
                use_prod: bits & 2 != 0,
                use_consistency: bits & 4 != 0,
            };
            fd_check(flags, 20 + bits as u64 * 7);
        }
    }

    #[test]
    fn consistency_gradient_wrt_maps() {
        // dKL/ds^k(h,w) via the visual logits, against differences on s directly.
        let s = randn(40, (2, 2, 2));
        let pa = softmax(array![0.3, -0.4].view());
        let kl = |s: &Array3<f64>| consistency_loss(visual_distribution(s.view()).unwrap().view(), pa.view());
        let pv = visual_distribution(s.view()).unwrap();
        let (dz, _) = consistency_grad(pv.view(), pa.view());
        let h = 1e-6;
        for ((k, y, x), _) in s.indexed_iter() {
            let (mut p, mut m) = (s.clone(), s.clone());
            p[[k, y, x]] += h;
            m[[k, y, x]] -= h;
            let num = (kl(&p) - kl(&m)) / (2.0 * h);
            let analytic = dz[k] / 4.0;
            assert!((analytic - num).abs() / num.abs().max(1e-6) < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn divergence_is_nonnegative(a in proptest::collection::vec(-5.0f64..5.0, 2..6), seed in 0u64..1000) {
            let pv = softmax(Array1::from(a.clone()).view());
            let b = randn(seed, a.len());
            let pa = softmax(b.view());
            prop_assert!(consistency_loss(pv.view(), pa.view()) >= -1e-12);
            prop_assert!(consistency_loss(pv.view(), pv.view()).abs() < 1e-12);
        }

        #[test]
        fn softmax_outputs_are_shift_invariant(seed in 0u64..1000, shift in -10.0f64..10.0) {
            let s = randn(seed, (3, 2, 3));
            let shifted = s.mapv(|v| v + shift);
            let a = visual_distribution(s.view()).unwrap();
            let b = visual_distribution(shifted.view()).unwrap();
            prop_assert!((&a - &b).iter().all(|d| d.abs() < 1e-9));
            let a = infer_class_maps(s.view(), None).unwrap();
            let b = infer_class_maps(shifted.view(), None).unwrap();
            prop_assert!((&a - &b).iter().all(|d| d.abs() < 1e-9));
            for y in 0..2 {
                for x in 0..3 {
                    prop_assert!((a.slice(s![.., y, x]).sum() - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn zero_filter_silences_every_map(seed in 0u64..1000) {
            let m = randn(seed, (3, 3, 3));
            let mut l = randn(seed + 1, (3, 3)).mapv(f64::abs);
            l[[seed as usize % 3, 1]] = 0.0;
            let s = suppress_silent(m.view(), l.view()).unwrap();
            for k in 0..3 {
                prop_assert!(s[[k, seed as usize % 3, 1]] == 0.0);
            }
        }
    }
}
