//! COCO-style mask average precision: greedy score-ordered matching per
//! class at IoU thresholds 0.50:0.05:0.95, 101-point interpolated precision.

use serde::Serialize;

use crate::error::{PmtError, Result};

pub const RECALL_POINTS: usize = 101;

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub class: usize,
    pub score: f64,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtMask {
    pub class: usize,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageInstances {
    pub preds: Vec<ScoredMask>,
    pub gts: Vec<GtMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over thresholds per class; `None` without ground truth.
    pub per_class: Vec<Option<f64>>,
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Interpolated precision at 101 recall points from a ranked list of
/// true/false-positive flags.
pub fn interpolated_precision(flags: &[bool], num_gt: usize) -> Vec<f64> {
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect()
}

/// Ranked TP flags for one class at one threshold. Predictions are ranked
/// by score, ties by (image, index); each takes the best-IoU unmatched
/// ground truth of its image with IoU at least `thr`.
pub fn ranked_flags(images: &[ImageInstances], class: usize, thr: f64) -> Vec<bool> {
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for (j, p) in im.preds.iter().enumerate() {
            if p.class == class {
                order.push((i, j));
            }
        }
    }
    order.sort_by(|a, b| {
        let sa = images[a.0].preds[a.1].score;
        let sb = images[b.0].preds[b.1].score;
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let mut used: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let thr = thr.min(1.0 - 1e-10);
    order
        .into_iter()
        .map(|(i, j)| {
            let p = &images[i].preds[j];
            let mut best = thr;
            let mut hit = None;
            for (g, gt) in images[i].gts.iter().enumerate() {
                if gt.class != class || used[i][g] {
                    continue;
                }
                let iou = mask_iou(&p.mask, &gt.mask);
                if iou < best {
                    continue;
                }
                best = iou;
                hit = Some(g);
            }
            if let Some(g) = hit {
                used[i][g] = true;
            }
            hit.is_some()
        })
        .collect()
}

pub fn mask_ap(images: &[ImageInstances], num_classes: usize) -> Result<Option<ApResult>> {
    for im in images {
        let n = im.preds.iter().map(|p| p.mask.len()).chain(im.gts.iter().map(|g| g.mask.len()));
        let mut n = n.peekable();
        if let Some(&first) = n.peek() {
            if n.any(|l| l != first) {
                return Err(PmtError::config("masks of one image differ in size"));
            }
        }
        if im.preds.iter().any(|p| p.class >= num_classes) || im.gts.iter().any(|g| g.class >= num_classes) {
            return Err(PmtError::config("instance class outside the class range"));
        }
    }
    let thresholds = iou_thresholds();
    let mut per_class = vec![None; num_classes];
    let mut at = vec![Vec::new(); thresholds.len()];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let num_gt: usize = images.iter().map(|im| im.gts.iter().filter(|g| g.class == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut sum = 0.0;
        for (t, &thr) in thresholds.iter().enumerate() {
            let q = interpolated_precision(&ranked_flags(images, c, thr), num_gt);
            let ap = q.iter().sum::<f64>() / RECALL_POINTS as f64;
            at[t].push(ap);
            sum += ap;
        }
        *slot = Some(sum / thresholds.len() as f64);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Ok(None);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Some(ApResult {
        ap: mean(&present),
        ap50: mean(&at[0]),
        ap75: mean(&at[5]),
        per_class,
    }))
}
