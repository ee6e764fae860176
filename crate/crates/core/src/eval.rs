//! Evaluation of trained models over manifest splits.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LoadedClip;
use crate::dictionary::ObjectDictionary;
use crate::error::{invalid, Result};
use crate::metrics::{
    auc, binarize, ciou, ciou_mean, heatmap_to_box, iou, nmi, nsa_counts, nsa_pooled, resize_bilinear, sounding_map,
    BoundingBox, Detection, EvalRecord, GroundTruth,
};
use crate::model::{localization_map, Model};
use crate::stage1::{compute_representations, encode_clips, nearest_keys};
use crate::stage2::{infer_clips, ClipMaps};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Success threshold of CIoU@t.
    pub ciou_threshold: f64,
    /// Silent-area threshold on normalised maps.
    pub nsa_tau: f64,
    /// Relative threshold turning a map into a predicted area or box.
    pub area_threshold: f32,
    /// Success threshold for single-source IoU.
    pub iou_threshold: f64,
    /// Box overlap required by the sounding mAP.
    pub map_iou: f64,
    /// Mask threshold for object representations.
    pub binarize_threshold: f32,
    /// Filter category maps by the localization map.
    pub use_prod: bool,
    /// Seed of the random category-to-map baseline.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ciou_threshold: 0.3,
            nsa_tau: 0.05,
            area_threshold: 0.5,
            iou_threshold: 0.5,
            map_iou: 0.3,
            binarize_threshold: 0.05,
            use_prod: true,
            seed: 0,
        }
    }
}

/// Boxes of a clip in the grid of its loaded frame.
pub fn clip_boxes(clip: &LoadedClip) -> Result<Vec<BoundingBox>> {
    let (_, h, w) = clip.frame.dim();
    clip.record
        .objects
        .iter()
        .map(|o| Ok(o.to_box()?.rescale(clip.source_size, (h, w))))
        .collect()
}

/// Predicted area of a low-resolution map at image resolution.
pub fn predicted_area(map: ArrayView2<f32>, size: (usize, usize), rel: f32) -> Array2<bool> {
    binarize(resize_bilinear(map, size.0, size.1).view(), rel)
}

/// Per-sample IoU of every category map against that category's box
/// (0 for categories without a box).
fn category_ious(maps: &[Array2<bool>], boxes: &[BoundingBox], order: &[usize]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; maps.len()];
    for b in boxes {
        out[b.category] = iou(maps[order[b.category]].view(), b)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiEval {
    pub records: Vec<EvalRecord>,
    /// Same maps with categories dealt to maps by a random permutation per sample.
    pub random_records: Vec<EvalRecord>,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Class-aware evaluation over annotated multi-source clips.
pub fn evaluate_multi(model: &Model, dict: &ObjectDictionary, clips: &[LoadedClip], opts: &EvalOptions) -> Result<MultiEval> {
    if clips.is_empty() {
        return Err(invalid!("no clips to evaluate"));
    }
    let maps = infer_clips(model, clips, dict, opts.use_prod)?;
    score_multi(clips, &maps, dict, opts)
}

/// Scores precomputed maps, one entry of `maps` per clip.
pub fn score_multi(clips: &[LoadedClip], maps: &[ClipMaps], dict: &ObjectDictionary, opts: &EvalOptions) -> Result<MultiEval> {
    if clips.is_empty() || clips.len() != maps.len() {
        return Err(invalid!("{} clips for {} map sets", clips.len(), maps.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = MultiEval {
        records: Vec::new(),
        random_records: Vec::new(),
        detections: Vec::new(),
        ground_truth: Vec::new(),
    };
    for (i, (clip, cm)) in clips.iter().zip(maps).enumerate() {
        let (_, h, w) = clip.frame.dim();
        let boxes = clip_boxes(clip)?;
        let n = cm.class_maps.dim().0;
        if let Some(b) = boxes.iter().find(|b| b.category >= n) {
            return Err(invalid!("`{}` has category {} outside [0, {n})", clip.record.clip_id, b.category));
        }
        let mut sounding = vec![false; n];
        for b in boxes.iter().filter(|b| b.sounding) {
            sounding[b.category] = true;
        }
        if !sounding.iter().any(|&s| s) {
            return Err(invalid!("`{}` has no sounding object", clip.record.clip_id));
        }
        let areas: Vec<Array2<bool>> = cm
            .class_maps
            .axis_iter(Axis(0))
            .map(|m| predicted_area(m, (h, w), opts.area_threshold))
            .collect();
        let identity: Vec<usize> = (0..n).collect();
        let mut shuffled = identity.clone();
        shuffled.shuffle(&mut rng);
        let (below, _) = nsa_counts(cm.category_s.view(), &sounding, opts.nsa_tau)?;
        let (_, gh, gw) = cm.category_s.dim();
        let record = |ious| EvalRecord {
            clip_id: clip.record.clip_id.clone(),
            ious,
            sounding: sounding.clone(),
            area: gh * gw,
            tau: opts.nsa_tau,
            silent_below: below,
        };
        out.records.push(record(category_ious(&areas, &boxes, &identity)?));
        out.random_records.push(record(category_ious(&areas, &boxes, &shuffled)?));

        let mass = category_mass(cm, dict)?;
        for (k, m) in cm.class_maps.axis_iter(Axis(0)).enumerate() {
            if let Ok(bbox) = heatmap_to_box(resize_bilinear(m, h, w).view(), opts.area_threshold, k) {
                out.detections.push(Detection {
                    sample: i,
                    bbox,
                    score: mass[k],
                });
            }
        }
        for b in boxes.iter().filter(|b| b.sounding) {
            out.ground_truth.push(GroundTruth { sample: i, bbox: *b });
        }
    }
    Ok(out)
}

/// Visual distribution mass of every category.
pub fn category_mass(cm: &ClipMaps, dict: &ObjectDictionary) -> Result<Vec<f64>> {
    let a = dict
        .categories
        .as_ref()
        .ok_or_else(|| invalid!("dictionary has no cluster-to-category assignment"))?;
    let mut mass = vec![0.0; a.num_categories];
    for (k, &c) in a.map.iter().enumerate() {
        mass[c] += cm.pv[k] as f64;
    }
    Ok(mass)
}

/// IoU of each single-source clip's localization map against its object box.
pub fn single_source_ious(model: &Model, clips: &[LoadedClip], opts: &EvalOptions) -> Result<Vec<f64>> {
    let (audio, visual) = encode_clips(model, clips)?;
    let (w, b) = (model.loc_weight(), model.loc_bias());
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let boxes = clip_boxes(clip)?;
            let gt = boxes
                .first()
                .ok_or_else(|| invalid!("`{}` has no annotated box", clip.record.clip_id))?;
            let l = localization_map(audio.row(i), visual.index_axis(Axis(0), i), w, b);
            let (_, h, wd) = clip.frame.dim();
            iou(predicted_area(l.view(), (h, wd), opts.area_threshold).view(), gt)
        })
        .collect()
}

/// NMI between nearest-key clusters and object categories.
pub fn representation_nmi(model: &Model, dict: &ObjectDictionary, clips: &[LoadedClip], threshold: f32) -> Result<f64> {
    let labels: Vec<usize> = clips
        .iter()
        .map(|c| {
            c.record
                .category
                .ok_or_else(|| invalid!("`{}` has no category", c.record.clip_id))
        })
        .collect::<Result<_>>()?;
    let reps = compute_representations(model, clips, threshold)?;
    nmi(&nearest_keys(reps.view(), dict.keys.view()), &labels)
}

/// Aggregated evaluation numbers; serialises with sorted keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<EvalRecord>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&serde_json::to_value(self)?)?;
        s.push('\n');
        Ok(s)
    }
}

/// Fills the multi-source entries of `report`.
pub fn summarize_multi(report: &mut Report, eval: &MultiEval, opts: &EvalOptions) -> Result<()> {
    let m = &mut report.metrics;
    m.insert("ciou".into(), ciou(&eval.records, opts.ciou_threshold)?);
    m.insert("ciou_mean".into(), ciou_mean(&eval.records)?);
    m.insert("ciou_random".into(), ciou(&eval.random_records, opts.ciou_threshold)?);
    m.insert("ciou_random_mean".into(), ciou_mean(&eval.random_records)?);
    m.insert("nsa".into(), nsa_pooled(&eval.records)?);
    m.insert("sounding_map".into(), sounding_map(&eval.detections, &eval.ground_truth, opts.map_iou)?);
    report.counts.insert("multi_clips".into(), eval.records.len());
    report.records = eval.records.clone();
    Ok(())
}

/// Fills the single-source entries of `report`.
pub fn summarize_single(report: &mut Report, ious: &[f64], opts: &EvalOptions) -> Result<()> {
    let hit = ious.iter().filter(|&&v| v >= opts.iou_threshold).count();
    report.metrics.insert("iou".into(), hit as f64 / ious.len().max(1) as f64);
    report.metrics.insert("auc".into(), auc(ious)?);
    report.counts.insert("single_clips".into(), ious.len());
    Ok(())
}
