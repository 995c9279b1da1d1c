//! Independent reference evaluators and random instance generators shared by
//! the integration tests and the acceptance run.

#![allow(dead_code)]

use std::collections::BTreeMap;

use pmt_core::matching::CostMatrix;
use pmt_core::metrics::ap::{GtMask, ImageInstances, ScoredMask};
use pmt_core::metrics::panoptic::{PanopticMap, SegmentInfo};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Minimum total cost over every injective target -> query assignment,
/// summed in target order.
pub fn brute_force_assignment(cost: &CostMatrix) -> f64 {
    fn rec(cost: &CostMatrix, g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if g == cost.targets {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for q in 0..cost.queries {
            if !used[q] {
                used[q] = true;
                rec(cost, g + 1, used, acc + cost.get(q, g), best);
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; cost.queries], 0.0, &mut best);
    if cost.targets == 0 {
        0.0
    } else {
        best
    }
}

pub fn random_cost(rng: &mut ChaCha8Rng, queries: usize, targets: usize) -> CostMatrix {
    let data = (0..queries * targets).map(|_| rng.gen_range(-5.0..5.0)).collect();
    CostMatrix::new(queries, targets, data).unwrap()
}

/// Per-class `(tp, fp, fn, iou_sum)`.
pub type ClassStats = Vec<(u64, u64, u64, f64)>;

/// Panoptic matching by exhaustive pair scan over a set of frames treated as
/// one raster. Stats are appended to `stats`.
pub fn pq_oracle_frames(pred: &[&PanopticMap], gt: &[&PanopticMap], stats: &mut ClassStats) {
    let table = |maps: &[&PanopticMap]| {
        let mut t: BTreeMap<u32, usize> = BTreeMap::new();
        for m in maps {
            for s in &m.segments {
                t.entry(s.id).or_insert(s.class);
            }
        }
        t
    };
    let (pt, gtab) = (table(pred), table(gt));
    let pixels = || {
        pred.iter()
            .zip(gt)
            .flat_map(|(p, g)| p.ids.iter().copied().zip(g.ids.iter().copied()))
    };
    let count = |f: &dyn Fn(u32, u32) -> bool| pixels().filter(|&(p, g)| f(p, g)).count() as f64;
    let mut pred_matched = Vec::new();
    let mut gt_matched = Vec::new();
    for (&g, &gc) in &gtab {
        for (&p, &pc) in &pt {
            if pc != gc {
                continue;
            }
            let inter = count(&|a, b| a == p && b == g);
            if inter == 0.0 {
                continue;
            }
            let area_p = count(&|a, _| a == p);
            let area_g = count(&|_, b| b == g);
            let void_p = count(&|a, b| a == p && b == 0);
            let iou = inter / (area_p + area_g - inter - void_p);
            if iou > 0.5 {
                stats[gc].0 += 1;
                stats[gc].3 += iou;
                gt_matched.push(g);
                pred_matched.push(p);
            }
        }
    }
    for (&g, &gc) in &gtab {
        if g != 0 && count(&|_, b| b == g) > 0.0 && !gt_matched.contains(&g) {
            stats[gc].2 += 1;
        }
    }
    for (&p, &pc) in &pt {
        let area = count(&|a, _| a == p);
        if p == 0 || area == 0.0 || pred_matched.contains(&p) {
            continue;
        }
        if count(&|a, b| a == p && b == 0) / area > 0.5 {
            continue;
        }
        stats[pc].1 += 1;
    }
}

pub fn pq_from_stats(stats: &ClassStats) -> Option<f64> {
    let present: Vec<f64> = stats
        .iter()
        .filter(|s| s.0 + s.1 + s.2 > 0)
        .map(|s| s.3 / (s.0 as f64 + 0.5 * s.1 as f64 + 0.5 * s.2 as f64))
        .collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn pq_oracle(pred: &[PanopticMap], gt: &[PanopticMap], classes: usize) -> Option<f64> {
    let mut stats = vec![(0, 0, 0, 0.0); classes];
    for (p, g) in pred.iter().zip(gt) {
        pq_oracle_frames(&[p], &[g], &mut stats);
    }
    pq_from_stats(&stats)
}

/// Per-window PQ over every run of `k + 1` frames, averaged over windows.
pub fn vpq_oracle(clips: &[(Vec<PanopticMap>, Vec<PanopticMap>)], classes: usize, windows: &[usize]) -> Option<f64> {
    let mut vals = Vec::new();
    for &k in windows {
        let mut stats = vec![(0, 0, 0, 0.0); classes];
        for (pred, gt) in clips {
            if k + 1 > gt.len() {
                continue;
            }
            for s in 0..gt.len() - k {
                let p: Vec<&PanopticMap> = pred[s..=s + k].iter().collect();
                let g: Vec<&PanopticMap> = gt[s..=s + k].iter().collect();
                pq_oracle_frames(&p, &g, &mut stats);
            }
        }
        if let Some(v) = pq_from_stats(&stats) {
            vals.push(v);
        }
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Random raster over ids `1..=segs` plus void, with a class per id.
pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: &[usize]) -> PanopticMap {
    let ids = (0..h * w)
        .map(|_| if rng.gen_bool(0.15) { 0 } else { rng.gen_range(1..=classes.len() as u32) })
        .collect();
    PanopticMap {
        height: h,
        width: w,
        ids,
        segments: classes
            .iter()
            .enumerate()
            .map(|(i, &class)| SegmentInfo {
                id: i as u32 + 1,
                class,
                is_thing: class >= 2,
            })
            .collect(),
    }
}

/// A noisy copy of `gt`: ids relabelled by `offset`, a fraction of pixels
/// reassigned, and occasionally a class flipped.
pub fn perturb_map(rng: &mut ChaCha8Rng, gt: &PanopticMap, noise: f64, offset: u32, classes: usize) -> PanopticMap {
    let n = gt.segments.len() as u32;
    let ids = gt
        .ids
        .iter()
        .map(|&v| {
            if rng.gen_bool(noise) {
                rng.gen_range(0..=n + 1)
            } else {
                v
            }
        })
        .map(|v| if v == 0 { 0 } else { v + offset })
        .collect();
    let mut segments: Vec<SegmentInfo> = gt
        .segments
        .iter()
        .map(|s| SegmentInfo {
            id: s.id + offset,
            class: if rng.gen_bool(0.1) { rng.gen_range(0..classes) } else { s.class },
            is_thing: s.is_thing,
        })
        .collect();
    segments.push(SegmentInfo {
        id: n + 1 + offset,
        class: rng.gen_range(0..classes),
        is_thing: true,
    });
    PanopticMap {
        height: gt.height,
        width: gt.width,
        ids,
        segments,
    }
}

pub fn random_pq_case(rng: &mut ChaCha8Rng, classes: usize) -> (Vec<PanopticMap>, Vec<PanopticMap>) {
    let images = rng.gen_range(1..=3);
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..images {
        let (h, w) = (rng.gen_range(3..=7), rng.gen_range(3..=7));
        let segs = rng.gen_range(1..=5);
        let cls: Vec<usize> = (0..segs).map(|_| rng.gen_range(0..classes)).collect();
        let gt = random_map(rng, h, w, &cls);
        let noise = rng.gen_range(0.0..0.5);
        preds.push(perturb_map(rng, &gt, noise, 10, classes));
        gts.push(gt);
    }
    (preds, gts)
}

/// A clip of maps with ids stable across frames and per-frame noise; the
/// prediction may swap two track ids partway through.
pub fn random_track_case(rng: &mut ChaCha8Rng, classes: usize) -> (Vec<PanopticMap>, Vec<PanopticMap>) {
    let frames = rng.gen_range(1..=4);
    let (h, w) = (rng.gen_range(2..=5), rng.gen_range(3..=6));
    let segs = rng.gen_range(1..=4);
    let cls: Vec<usize> = (0..segs).map(|_| rng.gen_range(0..classes)).collect();
    let swap_at = rng.gen_range(0..=frames);
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for f in 0..frames {
        let gt = random_map(rng, h, w, &cls);
        let noise = rng.gen_range(0.0..0.4);
        let mut pred = perturb_map(rng, &gt, noise, 5, classes);
        if f >= swap_at && segs >= 2 {
            for v in &mut pred.ids {
                *v = match *v {
                    6 => 7,
                    7 => 6,
                    x => x,
                };
            }
        }
        // Classes of a track stay fixed across frames; the spurious id is
        // one more track.
        pred.segments = cls
            .iter()
            .chain(std::iter::once(&0))
            .enumerate()
            .map(|(i, &class)| SegmentInfo {
                id: i as u32 + 6,
                class,
                is_thing: class >= 2,
            })
            .collect();
        preds.push(pred);
        gts.push(gt);
    }
    (preds, gts)
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mask AP evaluated from the definitions: greedy matching in score order,
/// then for each recall level the best precision at any rank reaching it.
pub fn ap_oracle(images: &[ImageInstances], classes: usize) -> Option<f64> {
    let mut per_class = Vec::new();
    for c in 0..classes {
        let num_gt: usize = images.iter().map(|im| im.gts.iter().filter(|g| g.class == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut preds: Vec<(f64, usize, usize)> = Vec::new();
        for (i, im) in images.iter().enumerate() {
            for (j, p) in im.preds.iter().enumerate() {
                if p.class == c {
                    preds.push((p.score, i, j));
                }
            }
        }
        preds.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut total = 0.0;
        for t in 0..10 {
            let thr = (0.5 + 0.05 * t as f64).min(1.0 - 1e-10);
            let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
            let mut tp = 0usize;
            let mut curve = Vec::new();
            for (rank, &(_, i, j)) in preds.iter().enumerate() {
                let p = &images[i].preds[j];
                let mut choice: Option<(usize, f64)> = None;
                for (g, gt) in images[i].gts.iter().enumerate() {
                    if gt.class != c || taken[i][g] {
                        continue;
                    }
                    let v = iou(&p.mask, &gt.mask);
                    // Later ground truth wins ties.
                    if v >= thr && choice.is_none_or(|(_, b)| v >= b) {
                        choice = Some((g, v));
                    }
                }
                if let Some((g, _)) = choice {
                    taken[i][g] = true;
                    tp += 1;
                }
                curve.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
            }
            let mut sum = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                sum += curve.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
            }
            total += sum / 101.0;
        }
        per_class.push(total / 10.0);
    }
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

pub fn random_ap_case(rng: &mut ChaCha8Rng, classes: usize) -> Vec<ImageInstances> {
    let pixels = 12;
    let scores = [0.3, 0.5, 0.5, 0.7, 0.9];
    (0..rng.gen_range(1..=4))
        .map(|_| {
            let gts: Vec<GtMask> = (0..rng.gen_range(0..=3))
                .map(|_| GtMask {
                    class: rng.gen_range(0..classes),
                    mask: (0..pixels).map(|_| rng.gen_bool(0.4)).collect(),
                })
                .collect();
            let mut preds = Vec::new();
            for g in &gts {
                if !rng.gen_bool(0.7) {
                    continue;
                }
                preds.push(ScoredMask {
                    class: if rng.gen_bool(0.85) { g.class } else { rng.gen_range(0..classes) },
                    score: *scores.choose(rng).unwrap(),
                    mask: g.mask.iter().map(|&b| if rng.gen_bool(0.15) { !b } else { b }).collect(),
                });
            }
            for _ in 0..rng.gen_range(0..=2) {
                preds.push(ScoredMask {
                    class: rng.gen_range(0..classes),
                    score: *scores.choose(rng).unwrap(),
                    mask: (0..pixels).map(|_| rng.gen_bool(0.4)).collect(),
                });
            }
            preds.shuffle(rng);
            ImageInstances { preds, gts }
        })
        .collect()
}
