//! Panoptic quality. Segments match when they share a class and their IoU
//! exceeds 0.5; void pixels are left out of the union, and unmatched
//! predictions lying mostly on void are not counted as false positives.

use std::collections::BTreeMap;

use serde::Serialize;

use super::panoptic::PanopticMap;
use crate::error::{PmtError, Result};

/// Integer counts plus the IoU sum of true positives for one class.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PqStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PqStats {
    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    fn denom(&self) -> f64 {
        self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64
    }

    pub fn pq(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.iou_sum / self.denom())
    }

    pub fn sq(&self) -> Option<f64> {
        (!self.is_empty()).then(|| if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 })
    }

    pub fn rq(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.tp as f64 / self.denom())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PqResult {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// `None` for classes with no segments on either side.
    pub per_class: Vec<Option<f64>>,
    /// Classes that entered the average.
    pub classes: usize,
}

/// Per-class accumulator; merging is order-independent for the counts.
#[derive(Clone, Debug, PartialEq)]
pub struct PqAccumulator {
    pub per_class: Vec<PqStats>,
}

/// Pixel counts of one (prediction, ground truth) pair of maps.
pub struct Overlaps {
    /// `(gt id, pred id) -> intersection` over non-void ground truth.
    pub pairs: BTreeMap<(u32, u32), u64>,
    pub gt_area: BTreeMap<u32, u64>,
    pub pred_area: BTreeMap<u32, u64>,
    /// Prediction pixels that fall on ground-truth void.
    pub pred_void: BTreeMap<u32, u64>,
}

pub fn overlaps(pred: &PanopticMap, gt: &PanopticMap) -> Result<Overlaps> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(PmtError::config(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut o = Overlaps {
        pairs: BTreeMap::new(),
        gt_area: BTreeMap::new(),
        pred_area: BTreeMap::new(),
        pred_void: BTreeMap::new(),
    };
    for (&g, &p) in gt.ids.iter().zip(&pred.ids) {
        if g != 0 {
            *o.gt_area.entry(g).or_default() += 1;
        }
        if p != 0 {
            *o.pred_area.entry(p).or_default() += 1;
            if g == 0 {
                *o.pred_void.entry(p).or_default() += 1;
            } else {
                *o.pairs.entry((g, p)).or_default() += 1;
            }
        }
    }
    Ok(o)
}

impl Overlaps {
    /// IoU with prediction pixels on void removed from the union.
    pub fn iou(&self, g: u32, p: u32) -> f64 {
        let inter = self.pairs.get(&(g, p)).copied().unwrap_or(0);
        let union = self.pred_area[&p] + self.gt_area[&g] - inter - self.pred_void.get(&p).copied().unwrap_or(0);
        inter as f64 / union as f64
    }
}

impl PqAccumulator {
    pub fn new(num_classes: usize) -> Self {
        PqAccumulator {
            per_class: vec![PqStats::default(); num_classes],
        }
    }

    fn class_slot(&mut self, class: usize) -> Result<&mut PqStats> {
        let n = self.per_class.len();
        self.per_class
            .get_mut(class)
            .ok_or_else(|| PmtError::config(format!("class {class} outside {n} classes")))
    }

    pub fn add(&mut self, pred: &PanopticMap, gt: &PanopticMap) -> Result<()> {
        let o = overlaps(pred, gt)?;
        let mut gt_matched = BTreeMap::new();
        let mut pred_matched = BTreeMap::new();
        for &(g, p) in o.pairs.keys() {
            let (Some(gs), Some(ps)) = (gt.segment(g), pred.segment(p)) else {
                return Err(PmtError::config(format!("segment id {g} or {p} missing from its table")));
            };
            if gs.class != ps.class || gt_matched.contains_key(&g) || pred_matched.contains_key(&p) {
                continue;
            }
            let iou = o.iou(g, p);
            if iou > 0.5 {
                gt_matched.insert(g, iou);
                pred_matched.insert(p, ());
            }
        }
        // IoUs are added in ground-truth id order.
        for (&g, &iou) in &gt_matched {
            let s = self.class_slot(gt.segment(g).expect("checked").class)?;
            s.tp += 1;
            s.iou_sum += iou;
        }
        for seg in &gt.segments {
            if o.gt_area.contains_key(&seg.id) && !gt_matched.contains_key(&seg.id) {
                self.class_slot(seg.class)?.fn_ += 1;
            }
        }
        for seg in &pred.segments {
            let Some(&area) = o.pred_area.get(&seg.id) else { continue };
            if pred_matched.contains_key(&seg.id) {
                continue;
            }
            let void = o.pred_void.get(&seg.id).copied().unwrap_or(0);
            if void as f64 / area as f64 > 0.5 {
                continue;
            }
            self.class_slot(seg.class)?.fp += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PqAccumulator) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.iou_sum += b.iou_sum;
        }
    }

    /// Averages over classes that have at least one segment; `None` when no
    /// class does.
    pub fn result(&self) -> Option<PqResult> {
        let present: Vec<&PqStats> = self.per_class.iter().filter(|s| !s.is_empty()).collect();
        if present.is_empty() {
            return None;
        }
        let n = present.len() as f64;
        let mean = |f: &dyn Fn(&PqStats) -> Option<f64>| present.iter().filter_map(|s| f(s)).sum::<f64>() / n;
        Some(PqResult {
            pq: mean(&PqStats::pq),
            sq: mean(&PqStats::sq),
            rq: mean(&PqStats::rq),
            per_class: self.per_class.iter().map(PqStats::pq).collect(),
            classes: present.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::panoptic::SegmentInfo;

    fn map(ids: Vec<u32>, w: usize, segs: &[(u32, usize)]) -> PanopticMap {
        PanopticMap {
            height: ids.len() / w,
            width: w,
            ids,
            segments: segs
                .iter()
                .map(|&(id, class)| SegmentInfo { id, class, is_thing: true })
                .collect(),
        }
    }

    #[test]
    fn identical_maps_score_one() {
        let m = map(vec![1, 1, 2, 2, 0, 3], 3, &[(1, 0), (2, 1), (3, 1)]);
        let mut acc = PqAccumulator::new(2);
        acc.add(&m, &m).unwrap();
        let r = acc.result().unwrap();
        assert_eq!((r.pq, r.sq, r.rq), (1.0, 1.0, 1.0));
    }

    #[test]
    fn low_iou_is_fp_plus_fn() {
        // GT covers 5 pixels, prediction 2 of them plus nothing else: IoU 0.4.
        let gt = map(vec![1, 1, 1, 1, 1], 5, &[(1, 0)]);
        let pred = map(vec![7, 7, 0, 0, 0], 5, &[(7, 0)]);
        let mut acc = PqAccumulator::new(1);
        acc.add(&pred, &gt).unwrap();
        assert_eq!(acc.per_class[0], PqStats { tp: 0, fp: 1, fn_: 1, iou_sum: 0.0 });
        assert_eq!(acc.result().unwrap().pq, 0.0);
    }

    #[test]
    fn two_class_hand_case() {
        // Class A: GT 5 px, prediction covers 4 of them -> IoU 0.8.
        // Class B: one GT, no prediction -> FN.
        let gt = map(vec![1, 1, 1, 1, 1, 2, 2], 7, &[(1, 0), (2, 1)]);
        let pred = map(vec![5, 5, 5, 5, 0, 0, 0], 7, &[(5, 0)]);
        let mut acc = PqAccumulator::new(2);
        acc.add(&pred, &gt).unwrap();
        let r = acc.result().unwrap();
        assert!((r.pq - (0.8 / 1.0 + 0.0 / 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn prediction_on_void_is_ignored() {
        let gt = map(vec![0, 0, 0, 1], 4, &[(1, 0)]);
        let pred = map(vec![4, 4, 4, 1], 4, &[(1, 0), (4, 0)]);
        let mut acc = PqAccumulator::new(1);
        acc.add(&pred, &gt).unwrap();
        assert_eq!(acc.per_class[0], PqStats { tp: 1, fp: 0, fn_: 0, iou_sum: 1.0 });
    }

    #[test]
    fn void_pixels_leave_the_union() {
        // Prediction spills onto two void pixels: IoU = 2 / (4 + 2 - 2 - 2) = 1.
        let gt = map(vec![0, 0, 1, 1], 4, &[(1, 0)]);
        let pred = map(vec![1, 1, 1, 1], 4, &[(1, 0)]);
        let mut acc = PqAccumulator::new(1);
        acc.add(&pred, &gt).unwrap();
        assert_eq!(acc.per_class[0].iou_sum, 1.0);
    }

    #[test]
    fn class_mismatch_never_matches() {
        let gt = map(vec![1, 1], 2, &[(1, 0)]);
        let pred = map(vec![1, 1], 2, &[(1, 1)]);
        let mut acc = PqAccumulator::new(2);
        acc.add(&pred, &gt).unwrap();
        assert_eq!(acc.per_class[0].fn_, 1);
        assert_eq!(acc.per_class[1].fp, 1);
    }

    #[test]
    fn empty_is_absent() {
        assert!(PqAccumulator::new(3).result().is_none());
    }
}
