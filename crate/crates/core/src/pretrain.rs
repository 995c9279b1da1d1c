//! Encoder pretext training: classify the thing class covering the most
//! pixels, from the normalized class token. The probe is discarded and only
//! the encoder weights are kept.

use pmt_tensor::{Float, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::data::checkpoint;
use crate::data::container::TensorContainer;
use crate::data::synth::{is_thing, ImageSample, NUM_CLASSES};
use crate::encoder::{Encoder, PretextHead, PREFIX};
use crate::error::{PmtError, Result};
use crate::metrics::panoptic::PanopticMap;
use crate::optim::{learning_rate, AdamW};
use crate::train::stack_images;

/// Number of pretext labels (one per thing class).
pub const PRETEXT_CLASSES: usize = 3;
const FIRST_THING_CLASS: usize = NUM_CLASSES - PRETEXT_CLASSES;

/// Thing class with the largest visible area (ties: first in the segment
/// table), as a pretext label in `0..3`.
pub fn dominant_thing(map: &PanopticMap) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for s in map.segments.iter().filter(|s| is_thing(s.class)) {
        let a = map.area(s.id);
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((s.class, a));
        }
    }
    best.map(|(c, _)| c - FIRST_THING_CLASS)
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

pub struct Pretrained<T> {
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub head: PretextHead,
    pub records: Vec<PretrainRecord>,
}

impl<T: Float> Pretrained<T> {
    /// Encoder weights only.
    pub fn encoder_checkpoint(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        checkpoint::push_params(&mut c, &self.store, |n| n.starts_with(PREFIX))?;
        Ok(c)
    }

    /// Pretext accuracy on labelled samples.
    pub fn accuracy(&self, samples: &[ImageSample]) -> Result<f64> {
        let labelled: Vec<(&ImageSample, usize)> = samples.iter().filter_map(|s| dominant_thing(&s.panoptic).map(|l| (s, l))).collect();
        let mut correct = 0;
        for chunk in labelled.chunks(32) {
            let imgs: Vec<_> = chunk.iter().map(|(s, _)| s.image.cast::<T>()).collect();
            let refs: Vec<_> = imgs.iter().collect();
            let mut tape = Tape::inference();
            let out = self.encoder.forward(&mut tape, &self.store, &stack_images(&refs)?, &[])?;
            let logits = self.head.forward(&mut tape, &self.store, &out)?;
            for (row, (_, l)) in tape.value(logits).data().chunks(PRETEXT_CLASSES).zip(chunk) {
                let arg = (0..PRETEXT_CLASSES).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                correct += usize::from(arg == *l);
            }
        }
        Ok(correct as f64 / labelled.len().max(1) as f64)
    }
}

/// Trains a fresh encoder plus linear probe on the pretext task.
pub fn pretrain_encoder<T: Float>(config: &Config, samples: &[ImageSample], mut log: impl FnMut(&PretrainRecord)) -> Result<Pretrained<T>> {
    let labelled: Vec<(&ImageSample, usize)> = samples.iter().filter_map(|s| dominant_thing(&s.panoptic).map(|l| (s, l))).collect();
    if labelled.is_empty() {
        return Err(PmtError::config("no image contains a thing to classify"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    rng.set_stream(1);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&config.model, &mut store, &mut rng);
    let head = PretextHead::new(&mut store, config.model.embed_dim, PRETEXT_CLASSES, &mut rng);
    let t = &config.train;
    let mut opt = AdamW::new(t);
    let warmup = t.warmup_steps.min(t.pretrain_steps / 10);
    let mut records = Vec::with_capacity(t.pretrain_steps);
    for step in 0..t.pretrain_steps {
        let batch: Vec<usize> = (0..t.pretrain_batch_size).map(|_| rng.gen_range(0..labelled.len())).collect();
        let imgs: Vec<_> = batch.iter().map(|&i| labelled[i].0.image.cast::<T>()).collect();
        let refs: Vec<_> = imgs.iter().collect();
        let labels: Vec<usize> = batch.iter().map(|&i| labelled[i].1).collect();
        let mut tape = Tape::new();
        let out = encoder.forward(&mut tape, &store, &stack_images(&refs)?, &[])?;
        let logits = head.forward(&mut tape, &store, &out)?;
        let loss = tape.cross_entropy(logits, &labels, &vec![T::one(); labels.len()])?;
        let lv = tape.value(loss).item().as_f64();
        if !lv.is_finite() {
            let op = tape.first_non_finite().map_or("loss", |(_, op)| op);
            return Err(PmtError::NonFiniteLoss { step, op });
        }
        let correct = tape
            .value(logits)
            .data()
            .chunks(PRETEXT_CLASSES)
            .zip(&labels)
            .filter(|(row, &l)| (0..PRETEXT_CLASSES).fold(0, |b, k| if row[k] > row[b] { k } else { b }) == l)
            .count();
        tape.backward_into(loss, &mut store)?;
        let lr = learning_rate(t.pretrain_lr, warmup, t.pretrain_steps, step, t.image_schedule, t.poly_power);
        opt.step(&mut store, lr);
        store.zero_grad();
        let rec = PretrainRecord {
            step,
            lr,
            loss: lv,
            accuracy: correct as f64 / labels.len() as f64,
        };
        log(&rec);
        records.push(rec);
    }
    Ok(Pretrained {
        store,
        encoder,
        head,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::panoptic::SegmentInfo;

    #[test]
    fn dominant_thing_picks_largest_visible_area() {
        let map = PanopticMap {
            height: 1,
            width: 6,
            ids: vec![1, 3, 3, 4, 4, 4],
            segments: vec![
                SegmentInfo { id: 1, class: 0, is_thing: false },
                SegmentInfo { id: 3, class: 2, is_thing: true },
                SegmentInfo { id: 4, class: 4, is_thing: true },
            ],
        };
        assert_eq!(dominant_thing(&map), Some(2));
        let stuff_only = PanopticMap {
            ids: vec![1; 6],
            segments: vec![SegmentInfo { id: 1, class: 0, is_thing: false }],
            ..map
        };
        assert_eq!(dominant_thing(&stuff_only), None);
    }
}
