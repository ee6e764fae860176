//! Evaluation quantities: IoU, AUC, class-aware IoU, silent-area
//! suppression, NMI, sounding mAP and heatmap-to-box extraction.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

/// Inclusive-exclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub category: usize,
    pub sounding: bool,
}

impl BoundingBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32, category: usize, sounding: bool) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(invalid!("degenerate box ({x0},{y0},{x1},{y1})"));
        }
        Ok(Self {
            x0,
            y0,
            x1,
            y1,
            category,
            sounding,
        })
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    /// Rasterises the box onto an `h x w` grid.
    pub fn mask(&self, h: usize, w: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            (self.y0 as usize..self.y1 as usize).contains(&y) && (self.x0 as usize..self.x1 as usize).contains(&x)
        })
    }

    /// Scales coordinates from one grid to another, rounding outward.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        let sy = to.0 as f64 / from.0 as f64;
        let sx = to.1 as f64 / from.1 as f64;
        Self {
            x0: (self.x0 as f64 * sx).floor() as u32,
            y0: (self.y0 as f64 * sy).floor() as u32,
            x1: ((self.x1 as f64 * sx).ceil() as u32).min(to.1 as u32),
            y1: ((self.y1 as f64 * sy).ceil() as u32).min(to.0 as u32),
            ..*self
        }
    }
}

/// Cells whose value, after division by the map maximum, reaches `rel_threshold`.
/// A map without a positive maximum selects nothing.
pub fn binarize(map: ArrayView2<f32>, rel_threshold: f32) -> Array2<bool> {
    let max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > 0.0) {
        return Array2::from_elem(map.raw_dim(), false);
    }
    map.mapv(|v| v / max >= rel_threshold)
}

/// Minimal box around the cells of `map` reaching `rel_threshold` of its maximum.
pub fn heatmap_to_box(map: ArrayView2<f32>, rel_threshold: f32, category: usize) -> Result<BoundingBox> {
    let mask = binarize(map, rel_threshold);
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &on) in mask.indexed_iter() {
        if on {
            let b = bounds.get_or_insert((x, y, x, y));
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
    }
    let (x0, y0, x1, y1) = bounds.ok_or_else(|| Error::NoBox("map has no positive maximum".into()))?;
    BoundingBox::new(x0 as u32, y0 as u32, x1 as u32 + 1, y1 as u32 + 1, category, true)
}

/// Pixel-count IoU of two binary masks; an empty union scores 0.
pub fn mask_iou(a: ArrayView2<bool>, b: ArrayView2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err!("masks {:?} and {:?}", a.dim(), b.dim()));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &q) in a.iter().zip(b.iter()) {
        inter += (p && q) as u64;
        union += (p || q) as u64;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// IoU of a predicted region mask against a ground-truth box on the same grid.
pub fn iou(pred: ArrayView2<bool>, gt: &BoundingBox) -> Result<f64> {
    let (h, w) = pred.dim();
    if !gt.within(w as u32, h as u32) {
        return Err(invalid!("box {:?} exceeds {w}x{h} grid", gt.coords()));
    }
    mask_iou(pred, gt.mask(h, w).view())
}

pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0)) as u64;
    let ih = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0)) as u64;
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub const AUC_STEPS: usize = 20;

/// Area under the success-ratio curve over thresholds `0, 0.05, ..., 1`
/// by the trapezoidal rule.
pub fn auc(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(invalid!("AUC of an empty IoU list"));
    }
    if let Some(bad) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid!("IoU {bad} outside [0, 1]"));
    }
    let n = ious.len() as f64;
    let ratio: Vec<f64> = (0..=AUC_STEPS)
        .map(|i| {
            let t = i as f64 / AUC_STEPS as f64;
            ious.iter().filter(|&&v| v >= t).count() as f64 / n
        })
        .collect();
    let h = 1.0 / AUC_STEPS as f64;
    Ok(ratio.windows(2).map(|w| 0.5 * (w[0] + w[1]) * h).sum())
}

/// Per-sample quantities feeding the class-aware scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub clip_id: String,
    /// IoU of each category's predicted area against its box.
    pub ious: Vec<f64>,
    pub sounding: Vec<bool>,
    /// Cells per map.
    pub area: usize,
    pub tau: f64,
    /// Cells of silent maps below `tau` after normalisation.
    pub silent_below: usize,
}

/// `sum_k d_k IoU_k / sum_k d_k` for one sample.
pub fn sample_ciou(ious: &[f64], sounding: &[bool]) -> Result<f64> {
    if ious.len() != sounding.len() {
        return Err(shape_err!("{} IoUs for {} sounding flags", ious.len(), sounding.len()));
    }
    let n = sounding.iter().filter(|&&s| s).count();
    if n == 0 {
        return Err(invalid!("sample has no sounding category"));
    }
    Ok(ious.iter().zip(sounding).filter(|(_, &s)| s).map(|(v, _)| v).sum::<f64>() / n as f64)
}

fn sample_scores(records: &[EvalRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(invalid!("no evaluation records"));
    }
    records.iter().map(|r| sample_ciou(&r.ious, &r.sounding)).collect()
}

/// Fraction of samples whose class-aware IoU reaches `iou_threshold`.
pub fn ciou(records: &[EvalRecord], iou_threshold: f64) -> Result<f64> {
    let scores = sample_scores(records)?;
    Ok(scores.iter().filter(|&&s| s >= iou_threshold).count() as f64 / scores.len() as f64)
}

/// Mean class-aware IoU over samples.
pub fn ciou_mean(records: &[EvalRecord]) -> Result<f64> {
    let scores = sample_scores(records)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Cells of the silent maps falling below `tau` once every map of the sample
/// is divided by the largest value among them. Returns `(below, total)`.
pub fn nsa_counts(maps: ArrayView3<f32>, sounding: &[bool], tau: f64) -> Result<(usize, usize)> {
    let (k, h, w) = maps.dim();
    if k != sounding.len() {
        return Err(shape_err!("{k} maps for {} sounding flags", sounding.len()));
    }
    let max = maps.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let scale = if max > 0.0 { max as f64 } else { 0.0 };
    let (mut below, mut total) = (0, 0);
    for (map, _) in maps.axis_iter(Axis(0)).zip(sounding).filter(|(_, &s)| !s) {
        total += h * w;
        below += map
            .iter()
            .filter(|&&v| {
                let norm = if scale > 0.0 { v as f64 / scale } else { 0.0 };
                norm < tau
            })
            .count();
    }
    Ok((below, total))
}

/// Silent-area suppression for a single sample.
pub fn nsa(maps: ArrayView3<f32>, sounding: &[bool], tau: f64) -> Result<f64> {
    let (below, total) = nsa_counts(maps, sounding, tau)?;
    if total == 0 {
        return Err(invalid!("sample has no silent category"));
    }
    Ok(below as f64 / total as f64)
}

/// Silent-area suppression pooled over records.
pub fn nsa_pooled(records: &[EvalRecord]) -> Result<f64> {
    let (mut below, mut total) = (0usize, 0usize);
    for r in records {
        below += r.silent_below;
        total += r.sounding.iter().filter(|&&s| !s).count() * r.area;
    }
    if total == 0 {
        return Err(invalid!("no silent categories in any record"));
    }
    Ok(below as f64 / total as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalised by the arithmetic mean of the two entropies.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(shape_err!("{} assignments for {} labels", assignments.len(), labels.len()));
    }
    if assignments.is_empty() {
        return Err(invalid!("NMI of empty partitions"));
    }
    let n = assignments.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &b) in assignments.iter().zip(labels) {
        *joint.entry((a, b)).or_default() += 1;
        *ca.entry(a).or_default() += 1;
        *cb.entry(b).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha == 0.0 || hb == 0.0 {
        // Both single-block partitions are identical.
        return Ok(if ha == 0.0 && hb == 0.0 { 1.0 } else { 0.0 });
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(a, b), &c)| {
            let pab = c as f64 / n;
            pab * (pab * n * n / (ca[&a] as f64 * cb[&b] as f64)).ln()
        })
        .sum();
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

/// A scored detection in one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub sample: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Ground-truth sounding box in one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sample: usize,
    pub bbox: BoundingBox,
}

/// 11-point interpolated average precision from a ranked hit list.
pub fn eleven_point_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Mean over ground-truth categories of the 11-point AP at `iou_t`.
/// Each detection claims the unmatched same-category box of its sample with
/// the highest IoU; detections are ranked by descending score.
pub fn sounding_map(detections: &[Detection], gts: &[GroundTruth], iou_t: f64) -> Result<f64> {
    if gts.is_empty() {
        return Err(invalid!("sounding mAP needs ground-truth boxes"));
    }
    let categories: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.bbox.category).collect();
    let mut total = 0.0;
    for &cat in &categories {
        let cat_gt: Vec<&GroundTruth> = gts.iter().filter(|g| g.bbox.category == cat).collect();
        let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.bbox.category == cat).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; cat_gt.len()];
        let hits: Vec<bool> = dets
            .iter()
            .map(|d| {
                let best = cat_gt
                    .iter()
                    .enumerate()
                    .filter(|(i, g)| !taken[*i] && g.sample == d.sample)
                    .map(|(i, g)| (i, box_iou(&d.bbox, &g.bbox)))
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((i, v)) if v >= iou_t => {
                        taken[i] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        total += eleven_point_ap(&hits, cat_gt.len());
    }
    Ok(total / categories.len() as f64)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(map: ArrayView2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (sh, sw) = map.dim();
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f32) {
        let pos = ((i as f32 + 0.5) * src as f32 / dst as f32 - 0.5).clamp(0.0, (src - 1) as f32);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f32)
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1, fy) = coord(y, sh, h);
        let (x0, x1, fx) = coord(x, sw, w);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
