//! Mask IoU and average precision for instance predictions.
//!
//! Predictions are matched greedily in descending score order: each one
//! takes the still-unmatched ground truth with the highest IoU, provided the
//! IoU reaches `tau`. AP is the area under the precision envelope
//! (all-point interpolation).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::maps::{DenseMap, InstanceLabelMap};

/// Pixel set as sorted, deduplicated linear indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(Vec<usize>);

impl Mask {
    pub fn new(mut pixels: Vec<usize>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Self(pixels)
    }

    pub fn pixels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub mask: Mask,
    pub score: f64,
}

impl ScoredInstance {
    pub fn new(mask: Mask, score: f64) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::InvalidArgument("instance mask is empty".into()));
        }
        if !score.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "score {score} is not finite"
            )));
        }
        Ok(Self { mask, score })
    }
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks give 0.
pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    let (a, b) = (a.pixels(), b.pixels());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Descending score order, ties kept in insertion order.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching of predictions (already in rank order) to ground truth.
/// Returns whether each prediction is a true positive.
pub fn greedy_match(preds: &[&Mask], gts: &[Mask], tau: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = mask_iou(p, gt);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if iou >= tau => {
                    taken[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// AP from a ranked true-positive sequence and the number of ground truths.
///
/// Precision at rank `k` is `tp_k / k`; the envelope is its running maximum
/// from the tail, and each true positive adds `envelope / n_gt`.
pub fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if hits.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            if hit {
                tp += 1;
            }
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut sum = 0.0;
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            sum += envelope[k];
        }
    }
    sum / n_gt as f64
}

/// AP at match threshold `tau` for one image. No ground truth with any
/// prediction gives 0; no predictions with some ground truth gives 0; both
/// empty gives 1.
pub fn average_precision(preds: &[ScoredInstance], gts: &[Mask], tau: f64) -> f64 {
    let order = score_order(preds.iter().map(|p| p.score));
    let ranked: Vec<&Mask> = order.iter().map(|&k| &preds[k].mask).collect();
    interpolated_ap(&greedy_match(&ranked, gts, tau), gts.len())
}

/// Predictions and ground truth for one image.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub preds: Vec<ScoredInstance>,
    pub gts: Vec<Mask>,
}

impl ImageEval {
    /// Builds masks from label maps; `scores[n]` scores predicted instance
    /// `n + 1`.
    pub fn from_label_maps(
        pred: &InstanceLabelMap,
        gt: &InstanceLabelMap,
        scores: &[f64],
    ) -> Result<Self> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::ShapeMismatch(format!(
                "prediction is {}x{}, ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        if scores.len() != pred.count() as usize {
            return Err(Error::InvalidArgument(format!(
                "{} scores for {} predicted instances",
                scores.len(),
                pred.count()
            )));
        }
        let preds = pred
            .masks()
            .into_iter()
            .zip(scores)
            .map(|(m, &s)| ScoredInstance::new(Mask::new(m), s))
            .collect::<Result<_>>()?;
        let gts = gt.masks().into_iter().map(Mask::new).collect();
        Ok(Self { preds, gts })
    }
}

/// Mean saliency over each instance, indexed by instance id minus one.
pub fn mean_saliency_scores(instances: &InstanceLabelMap, saliency: &DenseMap) -> Result<Vec<f64>> {
    saliency.expect_channels("saliency map", 1)?;
    saliency.expect_size("saliency map", instances.height(), instances.width())?;
    let n = instances.count() as usize;
    let mut sum = vec![0.0f64; n];
    let mut area = vec![0usize; n];
    for (&l, &s) in instances.labels().iter().zip(saliency.data()) {
        if l > 0 {
            sum[l as usize - 1] += s as f64;
            area[l as usize - 1] += 1;
        }
    }
    Ok(sum.iter().zip(&area).map(|(s, &a)| s / a as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingMode {
    /// Rank all detections of all images together; one AP per threshold.
    Pooled,
    /// Mean of per-image APs.
    PerImage,
}

impl std::str::FromStr for AveragingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "per-image" => Ok(Self::PerImage),
            other => Err(Error::InvalidArgument(format!(
                "unknown averaging mode {other:?}, expected pooled or per-image"
            ))),
        }
    }
}

impl std::fmt::Display for AveragingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pooled => "pooled",
            Self::PerImage => "per-image",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: AveragingMode,
    /// Per-image AP at each threshold, keyed by `tau` formatted with two
    /// decimals.
    pub ap_per_image: Vec<BTreeMap<String, f64>>,
    pub map_at: BTreeMap<String, f64>,
}

pub fn tau_key(tau: f64) -> String {
    format!("{tau:.2}")
}

pub fn evaluate(images: &[ImageEval], taus: &[f64], mode: AveragingMode) -> Result<EvalReport> {
    for &tau in taus {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::OutOfRange(format!("tau {tau} outside (0, 1)")));
        }
    }
    let ap_per_image: Vec<BTreeMap<String, f64>> = images
        .iter()
        .map(|im| {
            taus.iter()
                .map(|&t| (tau_key(t), average_precision(&im.preds, &im.gts, t)))
                .collect()
        })
        .collect();
    let mut map_at = BTreeMap::new();
    for &tau in taus {
        let value = match mode {
            AveragingMode::PerImage => {
                if images.is_empty() {
                    0.0
                } else {
                    ap_per_image.iter().map(|m| m[&tau_key(tau)]).sum::<f64>() / images.len() as f64
                }
            }
            AveragingMode::Pooled => pooled_ap(images, tau),
        };
        map_at.insert(tau_key(tau), value);
    }
    Ok(EvalReport {
        mode,
        ap_per_image,
        map_at,
    })
}

/// Matching happens inside each image; ranking is global.
fn pooled_ap(images: &[ImageEval], tau: f64) -> f64 {
    let mut entries: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for im in images {
        let order = score_order(im.preds.iter().map(|p| p.score));
        let ranked: Vec<&Mask> = order.iter().map(|&k| &im.preds[k].mask).collect();
        let hits = greedy_match(&ranked, &im.gts, tau);
        entries.extend(order.iter().map(|&k| im.preds[k].score).zip(hits));
        n_gt += im.gts.len();
    }
    let order = score_order(entries.iter().map(|e| e.0));
    let hits: Vec<bool> = order.iter().map(|&k| entries[k].1).collect();
    interpolated_ap(&hits, n_gt)
}
