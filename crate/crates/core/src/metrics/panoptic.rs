//! Panoptic rasters and query-to-panoptic post-processing.

use pmt_tensor::kernels::{resize_bilinear, sigmoid_scalar, softmax};
use pmt_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::InferenceConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub class: usize,
    pub is_thing: bool,
}

/// Per-pixel segment ids (0 = void) plus the segment table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub segments: Vec<SegmentInfo>,
}

impl PanopticMap {
    pub fn void(height: usize, width: usize) -> Self {
        PanopticMap {
            height,
            width,
            ids: vec![0; height * width],
            segments: Vec::new(),
        }
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentInfo> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn area(&self, id: u32) -> usize {
        self.ids.iter().filter(|&&v| v == id).count()
    }

    pub fn mask(&self, id: u32) -> Vec<bool> {
        self.ids.iter().map(|&v| v == id).collect()
    }

    /// Per-pixel class, `None` for void.
    pub fn class_raster(&self) -> Vec<Option<usize>> {
        let max_id = self.segments.iter().map(|s| s.id).max().unwrap_or(0) as usize;
        let mut lut = vec![None; max_id + 1];
        for s in &self.segments {
            lut[s.id as usize] = Some(s.class);
        }
        self.ids
            .iter()
            .map(|&v| lut.get(v as usize).copied().flatten())
            .collect()
    }

    /// Checks the raster/table invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.ids.len() != self.height * self.width {
            return Err(format!("raster has {} pixels, expected {}", self.ids.len(), self.height * self.width));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.segments {
            if s.id == 0 || !seen.insert(s.id) {
                return Err(format!("segment id {} is zero or repeated", s.id));
            }
        }
        let mut stuff = std::collections::HashSet::new();
        for s in self.segments.iter().filter(|s| !s.is_thing) {
            if !stuff.insert(s.class) {
                return Err(format!("stuff class {} has more than one segment", s.class));
            }
        }
        if let Some(&v) = self.ids.iter().find(|&&v| v != 0 && !seen.contains(&v)) {
            return Err(format!("raster id {v} missing from the segment table"));
        }
        Ok(())
    }

    /// Stacks frames vertically into one raster; ids must already be
    /// consistent across frames.
    pub fn concat_vertical(frames: &[&PanopticMap]) -> PanopticMap {
        let width = frames.first().map_or(0, |f| f.width);
        let mut ids = Vec::new();
        let mut segments: Vec<SegmentInfo> = Vec::new();
        for f in frames {
            assert_eq!(f.width, width, "frame widths differ");
            ids.extend_from_slice(&f.ids);
            for s in &f.segments {
                if !segments.iter().any(|t| t.id == s.id) {
                    segments.push(*s);
                }
            }
        }
        PanopticMap {
            height: frames.iter().map(|f| f.height).sum(),
            width,
            ids,
            segments,
        }
    }
}

/// Class probabilities and per-query mask probabilities at image resolution.
pub struct QueryScores {
    /// `[K, C + 1]` softmax over classes.
    pub class_probs: Vec<Vec<f64>>,
    /// `[K, H * W]` sigmoid mask probabilities.
    pub mask_probs: Vec<Vec<f64>>,
    pub height: usize,
    pub width: usize,
}

impl QueryScores {
    /// `class_logits: [K, C+1]`, `mask_logits: [K, h, w]` (any resolution;
    /// bilinearly resized to `height x width`).
    pub fn from_logits<T: Float>(class_logits: &Tensor<T>, mask_logits: &Tensor<T>, height: usize, width: usize) -> Self {
        let probs = softmax(class_logits, 1).expect("class logits are 2-D");
        let c1 = class_logits.shape()[1];
        let class_probs = probs.data().chunks(c1).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
        let up = resize_bilinear(mask_logits, 1, height, width).expect("mask logits are [K, h, w]");
        let mask_probs = up
            .data()
            .chunks(height * width)
            .map(|r| r.iter().map(|&v| sigmoid_scalar(v).as_f64()).collect())
            .collect();
        QueryScores {
            class_probs,
            mask_probs,
            height,
            width,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.class_probs.len()
    }
}

/// Top class and its probability for each query.
pub fn top_classes(scores: &QueryScores) -> Vec<(usize, f64)> {
    scores
        .class_probs
        .iter()
        .map(|row| {
            let mut best = (0, row[0]);
            for (c, &p) in row.iter().enumerate().skip(1) {
                if p > best.1 {
                    best = (c, p);
                }
            }
            best
        })
        .collect()
}

/// Converts query outputs to a panoptic map: each pixel goes to the kept
/// query maximizing `score * mask_prob`; segments are pruned by overlap
/// retention and minimum area; stuff segments merge per class.
pub fn panoptic_inference(scores: &QueryScores, cfg: &InferenceConfig, is_thing: &dyn Fn(usize) -> bool) -> PanopticMap {
    inference_impl(scores, cfg, is_thing, false)
}

/// Thing ids offset by [`TRACK_ID_BASE`] from the query slot.
pub const TRACK_ID_BASE: u32 = 1000;

/// Like [`panoptic_inference`] but with ids that are stable across frames:
/// stuff segments get `class + 1`, thing segments `TRACK_ID_BASE + slot`.
pub fn panoptic_inference_tracked(scores: &QueryScores, cfg: &InferenceConfig, is_thing: &dyn Fn(usize) -> bool) -> PanopticMap {
    inference_impl(scores, cfg, is_thing, true)
}

fn inference_impl(scores: &QueryScores, cfg: &InferenceConfig, is_thing: &dyn Fn(usize) -> bool, tracked: bool) -> PanopticMap {
    let (h, w) = (scores.height, scores.width);
    let no_object = scores.class_probs.first().map_or(0, |r| r.len() - 1);
    let keep: Vec<(usize, usize, f64)> = top_classes(scores)
        .into_iter()
        .enumerate()
        .filter(|&(_, (c, p))| c != no_object && p >= cfg.score_threshold)
        .map(|(q, (c, p))| (q, c, p))
        .collect();
    let mut map = PanopticMap::void(h, w);
    if keep.is_empty() {
        return map;
    }
    let mut owner = vec![0usize; h * w];
    for (px, o) in owner.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for (k, &(q, _, p)) in keep.iter().enumerate() {
            let v = p * scores.mask_probs[q][px];
            if v > best {
                best = v;
                *o = k;
            }
        }
    }
    let mut stuff_ids: Vec<(usize, u32)> = Vec::new();
    let mut next_id = 1u32;
    for (k, &(q, class, _)) in keep.iter().enumerate() {
        let probs = &scores.mask_probs[q];
        let original = probs.iter().filter(|&&m| m >= cfg.mask_threshold).count();
        let pixels: Vec<usize> = (0..h * w)
            .filter(|&px| owner[px] == k && probs[px] >= cfg.mask_threshold)
            .collect();
        if original == 0 || pixels.is_empty() {
            continue;
        }
        let claimed = owner.iter().filter(|&&o| o == k).count();
        if (claimed as f64) / (original as f64) < cfg.overlap_threshold || pixels.len() < cfg.min_area {
            continue;
        }
        let thing = is_thing(class);
        let id = if thing {
            None
        } else {
            stuff_ids.iter().find(|(c, _)| *c == class).map(|&(_, id)| id)
        };
        let id = id.unwrap_or_else(|| {
            let id = match (tracked, thing) {
                (false, _) => next_id,
                (true, true) => TRACK_ID_BASE + q as u32,
                (true, false) => class as u32 + 1,
            };
            next_id += 1;
            map.segments.push(SegmentInfo { id, class, is_thing: thing });
            if !thing {
                stuff_ids.push((class, id));
            }
            id
        });
        for px in pixels {
            map.ids[px] = id;
        }
    }
    map
}

/// Per-pixel class from `argmax_c sum_q p(c|q) * mask_q`, ignoring the
/// no-object class.
pub fn semantic_inference(scores: &QueryScores) -> Vec<usize> {
    let n = scores.height * scores.width;
    let c = scores.class_probs.first().map_or(0, |r| r.len() - 1);
    let mut out = vec![0usize; n];
    let mut acc = vec![0.0f64; c];
    for (px, o) in out.iter_mut().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (q, probs) in scores.class_probs.iter().enumerate() {
            let m = scores.mask_probs[q][px];
            for (a, &p) in acc.iter_mut().zip(&probs[..c]) {
                *a += p * m;
            }
        }
        let mut best = 0;
        for k in 1..c {
            if acc[k] > acc[best] {
                best = k;
            }
        }
        *o = best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(class_probs: Vec<Vec<f64>>, mask_probs: Vec<Vec<f64>>, h: usize, w: usize) -> QueryScores {
        QueryScores {
            class_probs,
            mask_probs,
            height: h,
            width: w,
        }
    }

    fn cfg() -> InferenceConfig {
        InferenceConfig {
            min_area: 1,
            ..InferenceConfig::default()
        }
    }

    #[test]
    fn confident_full_mask_covers_image() {
        let s = scores(vec![vec![0.0, 0.9, 0.1]], vec![vec![0.99; 16]], 4, 4);
        let map = panoptic_inference(&s, &cfg(), &|c| c == 1);
        assert_eq!(map.segments.len(), 1);
        assert!(map.ids.iter().all(|&v| v == map.segments[0].id));
    }

    #[test]
    fn all_no_object_is_void() {
        let s = scores(vec![vec![0.1, 0.1, 0.8]; 3], vec![vec![0.9; 16]; 3], 4, 4);
        let map = panoptic_inference(&s, &cfg(), &|_| true);
        assert!(map.ids.iter().all(|&v| v == 0));
        assert!(map.segments.is_empty());
    }

    #[test]
    fn overlap_goes_to_higher_combined_score() {
        // Query 0: score 0.9, mask 0.6 everywhere. Query 1: score 0.6, mask
        // 1.0 on the left half. Left: 0.54 vs 0.6 -> query 1; right -> query 0.
        let left: Vec<f64> = (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
        let s = scores(
            vec![vec![0.9, 0.05, 0.05], vec![0.2, 0.6, 0.2]],
            vec![vec![0.6; 16], left],
            4,
            4,
        );
        let c = InferenceConfig {
            overlap_threshold: 0.0,
            ..cfg()
        };
        let map = panoptic_inference(&s, &c, &|_| true);
        for (i, &id) in map.ids.iter().enumerate() {
            let class = map.segment(id).unwrap().class;
            assert_eq!(class, if i % 4 < 2 { 1 } else { 0 });
        }
    }

    #[test]
    fn stuff_merges_per_class() {
        let top: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        let bottom: Vec<f64> = top.iter().map(|v| 1.0 - v).collect();
        let s = scores(vec![vec![0.9, 0.1]; 2], vec![top, bottom], 4, 4);
        let map = panoptic_inference(&s, &cfg(), &|_| false);
        assert_eq!(map.segments.len(), 1);
        assert!(map.ids.iter().all(|&v| v == 1));
    }

    #[test]
    fn concat_vertical_keeps_ids() {
        let a = PanopticMap {
            height: 1,
            width: 2,
            ids: vec![1, 2],
            segments: vec![
                SegmentInfo { id: 1, class: 0, is_thing: false },
                SegmentInfo { id: 2, class: 3, is_thing: true },
            ],
        };
        let b = PanopticMap {
            ids: vec![2, 2],
            segments: vec![SegmentInfo { id: 2, class: 3, is_thing: true }],
            ..a.clone()
        };
        let c = PanopticMap::concat_vertical(&[&a, &b]);
        assert_eq!(c.height, 2);
        assert_eq!(c.area(2), 3);
        assert_eq!(c.segments.len(), 2);
        c.validate().unwrap();
    }
}
