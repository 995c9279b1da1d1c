//! Inference over image sets and clips, and the metric reports built on it.
//! Work is split into fixed chunks evaluated on a pool capped by
//! `PMT_THREADS`; chunk results merge in chunk order.

use std::collections::BTreeMap;

use pmt_tensor::{Float, ParamStore, Tape, Tensor};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{InferenceConfig, LossWeights};
use crate::data::synth::{is_thing, FIRST_THING_ID};
use crate::decoder::{DecodeMode, DecoderOutput};
use crate::error::{PmtError, Result};
use crate::loss::{cost_for_image, Target};
use crate::matching::video_match;
use crate::metrics::ap::{mask_ap, ApResult, GtMask, ImageInstances, ScoredMask};
use crate::metrics::miou::{ConfusionAccumulator, MiouResult};
use crate::metrics::panoptic::{panoptic_inference, panoptic_inference_tracked, semantic_inference, PanopticMap, QueryScores};
use crate::metrics::pq::{PqAccumulator, PqResult};
use crate::metrics::vpq::{VpqAccumulator, VpqResult, DEFAULT_WINDOWS};
use crate::model::SegModel;
use crate::temporal::TrackState;
use crate::train::{encode_frame, ImageSet};

const CHUNK: usize = 16;
const CLIP_CHUNK: usize = 8;

/// Pool sized by `PMT_THREADS` (unset or 0: rayon's default).
pub fn eval_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var("PMT_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| PmtError::config(format!("PMT_THREADS must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| PmtError::config(format!("thread pool: {e}")))
}

/// Class and mask logits of image `b` as `[K, C + 1]` and `[K, h, w]`.
pub fn image_logits<T: Float>(tape: &Tape<T>, out: &DecoderOutput, b: usize, mask_grid: (usize, usize)) -> (Tensor<T>, Tensor<T>) {
    let cl = tape.value(out.last.class_logits);
    let ml = tape.value(out.last.mask_logits);
    let (k, c1, p) = (cl.shape()[1], cl.shape()[2], ml.shape()[2]);
    let c = Tensor::new(&[k, c1], cl.data()[b * k * c1..(b + 1) * k * c1].to_vec()).expect("slice");
    let m = Tensor::new(&[k, mask_grid.0, mask_grid.1], ml.data()[b * k * p..(b + 1) * k * p].to_vec()).expect("slice");
    (c, m)
}

/// Eval-mode query scores for images `idx` of `set`.
pub fn predict_images<T: Float>(model: &SegModel, store: &ParamStore<T>, set: &ImageSet<T>, idx: &[usize]) -> Result<Vec<QueryScores>> {
    let mut tape = Tape::inference();
    let enc = set.encode(model, &mut tape, store, idx)?;
    let out = model.decode(&mut tape, store, &enc, None, DecodeMode::Eval)?;
    let (h, w) = (model.cfg.image_height, model.cfg.image_width);
    Ok((0..idx.len())
        .map(|b| {
            let (c, m) = image_logits(&tape, &out, b, model.cfg.mask_grid());
            QueryScores::from_logits(&c, &m, h, w)
        })
        .collect())
}

/// Instance predictions for AP: every query whose top class is a thing,
/// scored by class probability times mean mask probability inside its mask.
pub fn instances(scores: &QueryScores, gt: &PanopticMap, mask_threshold: f64) -> ImageInstances {
    let no_object = scores.class_probs.first().map_or(0, |r| r.len() - 1);
    let mut preds = Vec::new();
    for (q, row) in scores.class_probs.iter().enumerate() {
        let (mut c, mut p) = (0, row[0]);
        for (k, &v) in row.iter().enumerate().take(no_object).skip(1) {
            if v > p {
                (c, p) = (k, v);
            }
        }
        if !is_thing(c) {
            continue;
        }
        let probs = &scores.mask_probs[q];
        let mask: Vec<bool> = probs.iter().map(|&m| m >= mask_threshold).collect();
        let on = mask.iter().filter(|&&b| b).count();
        if on == 0 {
            continue;
        }
        let inside: f64 = probs.iter().zip(&mask).filter(|(_, &b)| b).map(|(&v, _)| v).sum();
        preds.push(ScoredMask {
            class: c,
            score: p * inside / on as f64,
            mask,
        });
    }
    let gts = gt
        .segments
        .iter()
        .filter(|s| s.is_thing)
        .map(|s| GtMask {
            class: s.class,
            mask: gt.mask(s.id),
        })
        .collect();
    ImageInstances { preds, gts }
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageMetrics {
    pub images: usize,
    pub pq: Option<PqResult>,
    pub miou: Option<MiouResult>,
    pub ap: Option<ApResult>,
}

impl ImageMetrics {
    pub fn pq_value(&self) -> f64 {
        self.pq.as_ref().map_or(0.0, |r| r.pq)
    }
}

pub fn evaluate_images<T: Float>(
    model: &SegModel,
    store: &ParamStore<T>,
    set: &ImageSet<T>,
    gts: &[PanopticMap],
    inf: &InferenceConfig,
) -> Result<ImageMetrics> {
    if gts.len() != set.len() {
        return Err(PmtError::config("one ground-truth map per image required"));
    }
    let classes = model.cfg.num_classes;
    let chunks: Vec<Vec<usize>> = (0..set.len()).collect::<Vec<_>>().chunks(CHUNK).map(|c| c.to_vec()).collect();
    let run = |idx: &Vec<usize>| -> Result<(PqAccumulator, ConfusionAccumulator, Vec<ImageInstances>)> {
        let scores = predict_images(model, store, set, idx)?;
        let mut pq = PqAccumulator::new(classes);
        let mut conf = ConfusionAccumulator::new(classes);
        let mut inst = Vec::new();
        for (s, &i) in scores.iter().zip(idx) {
            let pred = panoptic_inference(s, inf, &is_thing);
            pq.add(&pred, &gts[i])?;
            conf.add(&semantic_inference(s), &gts[i].class_raster())?;
            inst.push(instances(s, &gts[i], inf.mask_threshold));
        }
        Ok((pq, conf, inst))
    };
    let parts: Vec<_> = eval_pool()?.install(|| chunks.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    let mut pq = PqAccumulator::new(classes);
    let mut conf = ConfusionAccumulator::new(classes);
    let mut inst = Vec::new();
    for (p, c, i) in parts {
        pq.merge(&p);
        conf.merge(&c);
        inst.extend(i);
    }
    Ok(ImageMetrics {
        images: set.len(),
        pq: pq.result(),
        miou: conf.result(),
        ap: mask_ap(&inst, classes)?,
    })
}

/// Per-frame decoder outputs of a batch of clips, with query propagation.
pub struct ClipPredictions {
    /// `[clip][frame]`.
    pub scores: Vec<Vec<QueryScores>>,
    /// `[clip][frame]` final class logits `[K, C + 1]` and mask logits
    /// `[K, h, w]`, in f64.
    pub logits: Vec<Vec<(Tensor<f64>, Tensor<f64>)>>,
}

/// Runs clips `chunk` frame by frame, feeding each frame's decoded queries
/// to the next through the tracking state.
pub fn predict_clips<T: Float>(model: &SegModel, store: &ParamStore<T>, clips: &[ImageSet<T>], chunk: &[usize]) -> Result<ClipPredictions> {
    let frames = chunk.iter().map(|&i| clips[i].len()).min().unwrap_or(0);
    let (h, w) = (model.cfg.image_height, model.cfg.image_width);
    let mut state = TrackState::<T>::new(model.num_queries());
    let mut out = ClipPredictions {
        scores: chunk.iter().map(|_| Vec::new()).collect(),
        logits: chunk.iter().map(|_| Vec::new()).collect(),
    };
    for f in 0..frames {
        let mut tape = Tape::inference();
        let enc = encode_frame(model, &mut tape, store, clips, chunk, f)?;
        let prev = state.prev_queries.clone().map(|q| tape.constant(q));
        let dec = model.decode(&mut tape, store, &enc, prev, DecodeMode::Eval)?;
        for b in 0..chunk.len() {
            let (c, m) = image_logits(&tape, &dec, b, model.cfg.mask_grid());
            out.scores[b].push(QueryScores::from_logits(&c, &m, h, w));
            out.logits[b].push((c.cast(), m.cast()));
        }
        state.advance(tape.value(dec.queries).clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct VideoMetrics {
    pub clips: usize,
    pub vpq: Option<VpqResult>,
    /// Fraction of (object, later frame) pairs whose best-IoU query is the
    /// one matched when the object first appeared.
    pub association: Option<f64>,
    pub association_pairs: usize,
}

/// Binary IoU of `logits > 0` against `target`, and the soft IoU of the
/// sigmoid probabilities, which separates queries with equal binary masks.
fn mask_ious(logits: &[f64], target: &[f64]) -> (f64, f64) {
    let (mut inter, mut union) = (0usize, 0usize);
    let (mut si, mut su) = (0.0, 0.0);
    for (&x, &y) in logits.iter().zip(target) {
        let a = x > 0.0;
        let b = y > 0.5;
        inter += usize::from(a && b);
        union += usize::from(a || b);
        let pr = 1.0 / (1.0 + (-x).exp());
        si += pr * y;
        su += pr + y - pr * y;
    }
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    (iou, if su > 0.0 { si / su } else { 0.0 })
}

/// Association counts of one clip: `(correct, total)`. The best query for an
/// object has the highest binary IoU, ties broken by soft IoU.
pub fn association_counts(logits: &[(Tensor<f64>, Tensor<f64>)], targets: &[Target], weights: &LossWeights) -> Result<(usize, usize)> {
    let mut map: BTreeMap<u32, usize> = BTreeMap::new();
    let mut first_seen: BTreeMap<u32, usize> = BTreeMap::new();
    let (mut correct, mut total) = (0, 0);
    for (f, ((cl, ml), t)) in logits.iter().zip(targets).enumerate() {
        let k = cl.shape()[0];
        let p = ml.numel() / k;
        let mut tape = Tape::<f64>::inference();
        let c = tape.constant(cl.clone().reshape(&[1, k, cl.shape()[1]])?);
        let m = tape.constant(ml.clone().reshape(&[1, k, p])?);
        let pred = crate::decoder::Prediction {
            class_logits: c,
            mask_logits: m,
            grid_logits: m,
        };
        let cost = cost_for_image(&tape, &pred, 0, t, weights)?;
        video_match(&cost, &t.ids, &mut map)?;
        for (g, &id) in t.ids.iter().enumerate() {
            if id < FIRST_THING_ID {
                continue;
            }
            let first = *first_seen.entry(id).or_insert(f);
            if first == f {
                continue;
            }
            let target = &t.masks[g * p..(g + 1) * p];
            let mut best = (0usize, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (q, logits) in ml.data().chunks(p).enumerate() {
                let (iou, soft) = mask_ious(logits, target);
                if iou > best.1 || (iou == best.1 && soft > best.2) {
                    best = (q, iou, soft);
                }
            }
            total += 1;
            correct += usize::from(map.get(&id) == Some(&best.0));
        }
    }
    Ok((correct, total))
}

pub fn evaluate_clips<T: Float>(
    model: &SegModel,
    store: &ParamStore<T>,
    clips: &[ImageSet<T>],
    gts: &[Vec<PanopticMap>],
    inf: &InferenceConfig,
    weights: &LossWeights,
) -> Result<VideoMetrics> {
    if gts.len() != clips.len() {
        return Err(PmtError::config("one ground-truth sequence per clip required"));
    }
    let classes = model.cfg.num_classes;
    let chunks: Vec<Vec<usize>> = (0..clips.len()).collect::<Vec<_>>().chunks(CLIP_CHUNK).map(|c| c.to_vec()).collect();
    let run = |idx: &Vec<usize>| -> Result<(VpqAccumulator, usize, usize)> {
        let preds = predict_clips(model, store, clips, idx)?;
        let mut acc = VpqAccumulator::new(classes, &DEFAULT_WINDOWS);
        let (mut correct, mut total) = (0, 0);
        for (b, &i) in idx.iter().enumerate() {
            let maps: Vec<PanopticMap> = preds.scores[b].iter().map(|s| panoptic_inference_tracked(s, inf, &is_thing)).collect();
            let n = maps.len();
            acc.add_clip(&maps, &gts[i][..n])?;
            let (c, t) = association_counts(&preds.logits[b], &clips[i].targets[..n], weights)?;
            correct += c;
            total += t;
        }
        Ok((acc, correct, total))
    };
    let parts: Vec<_> = eval_pool()?.install(|| chunks.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    let mut acc = VpqAccumulator::new(classes, &DEFAULT_WINDOWS);
    let (mut correct, mut total) = (0, 0);
    for (a, c, t) in parts {
        acc.merge(&a);
        correct += c;
        total += t;
    }
    Ok(VideoMetrics {
        clips: clips.len(),
        vpq: acc.result(),
        association: (total > 0).then(|| correct as f64 / total as f64),
        association_pairs: total,
    })
}
