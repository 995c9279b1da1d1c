//! Training loop for images and clips: seeded batch sampling, matching,
//! deep-supervised loss, sharded gradient accumulation, AdamW, checkpoints.

use std::collections::BTreeMap;

use pmt_tensor::{Float, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::data::checkpoint::{self, push_u64, read_u64};
use crate::data::container::TensorContainer;
use crate::data::synth::ImageSample;
use crate::decoder::{AnnealSchedule, DecodeMode, DecoderOutput};
use crate::encoder::PREFIX;
use crate::error::{PmtError, Result};
use crate::loss::{cost_for_image, match_batch, segmentation_loss, LossBreakdown, Target};
use crate::matching::{video_match, MatchResult};
use crate::model::{Encoded, FeatureCache, ModelVariant, SegModel};
use crate::optim::{learning_rate, AdamW};

/// Images per encoder call when precomputing frozen features.
const FEATURE_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Image,
    Video,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(TrainMode::Image),
            "video" => Ok(TrainMode::Video),
            _ => Err(PmtError::config(format!("unknown mode {s:?} (expected image or video)"))),
        }
    }
}

/// Images with targets at mask resolution and, for a frozen encoder, cached
/// features. A clip is an `ImageSet` whose entries are its frames.
#[derive(Clone, Debug)]
pub struct ImageSet<T> {
    pub images: Vec<Tensor<T>>,
    pub targets: Vec<Target>,
    pub features: Option<Vec<FeatureCache<T>>>,
}

pub fn stack_images<T: Float>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| PmtError::config("empty image batch"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != first.shape() {
            return Err(PmtError::config(format!("image shapes {:?} and {:?} differ", im.shape(), first.shape())));
        }
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::new(&shape, data)?)
}

impl<T: Float> ImageSet<T> {
    pub fn new(samples: &[ImageSample], model: &SegModel, store: &ParamStore<T>) -> Result<Self> {
        let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
        let targets = samples
            .iter()
            .map(|s| Target::from_panoptic(&s.panoptic, model.cfg.mask_grid()))
            .collect::<Result<_>>()?;
        let features = if model.cfg.freeze_encoder {
            let mut all = Vec::with_capacity(images.len());
            for chunk in images.chunks(FEATURE_CHUNK) {
                let refs: Vec<&Tensor<T>> = chunk.iter().collect();
                all.extend(model.features(store, &stack_images(&refs)?)?);
            }
            Some(all)
        } else {
            None
        };
        Ok(ImageSet {
            images,
            targets,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Encoder outputs for the entries `idx`, from the cache when present.
    pub fn encode(&self, model: &SegModel, tape: &mut Tape<T>, store: &ParamStore<T>, idx: &[usize]) -> Result<Encoded> {
        match &self.features {
            Some(f) => model.encode_cached(tape, &idx.iter().map(|&i| &f[i]).collect::<Vec<_>>()),
            None => {
                let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.images[i]).collect();
                model.encode(tape, store, &stack_images(&refs)?)
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_class: f64,
    pub loss_bce: f64,
    pub loss_dice: f64,
}

impl StepRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }
}

pub struct Trainer<T> {
    pub config: Config,
    pub mode: TrainMode,
    pub model: SegModel,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
    pub rng: ChaCha8Rng,
    /// Completed optimizer steps.
    pub step: usize,
    pub schedule: AnnealSchedule,
}

impl<T: Float> Trainer<T> {
    /// Fresh model initialized from `config.train.seed`; the same generator
    /// then drives batch sampling and masking draws.
    pub fn new(config: &Config, variant: ModelVariant, mode: TrainMode) -> Result<Self> {
        config.validate()?;
        if mode == TrainMode::Video && variant == ModelVariant::EomtFrozen {
            return Err(PmtError::config("the injection baseline is image-only"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let model = SegModel::new(&config.model, variant, &mut store, &mut rng)?;
        let schedule = AnnealSchedule::new(&model.cfg, model.decoder_depth(), config.train.steps);
        Ok(Trainer {
            config: config.clone(),
            mode,
            model,
            opt: AdamW::new(&config.train),
            store,
            rng,
            step: 0,
            schedule,
        })
    }

    /// Replaces the encoder weights with a pretrained checkpoint's.
    pub fn load_encoder(&mut self, c: &TensorContainer) -> Result<()> {
        checkpoint::load_params(c, &mut self.store, |n| n.starts_with(PREFIX))?;
        Ok(())
    }

    /// Copies every parameter the checkpoint has (e.g. an image model into a
    /// video model whose propagation layer stays freshly initialized).
    pub fn load_available(&mut self, c: &TensorContainer) -> Result<usize> {
        checkpoint::load_params(c, &mut self.store, |n| c.get(n).is_some())
    }

    pub fn total_steps(&self) -> usize {
        self.config.train.steps
    }

    pub fn learning_rate(&self) -> f64 {
        let t = &self.config.train;
        let kind = match self.mode {
            TrainMode::Image => t.image_schedule,
            TrainMode::Video => t.video_schedule,
        };
        learning_rate(t.lr, t.warmup_steps, t.steps, self.step, kind, t.poly_power)
    }

    fn shards(&self, batch: usize) -> Result<usize> {
        let s = self.config.train.shards.max(1);
        if !batch.is_multiple_of(s) {
            return Err(PmtError::config(format!("batch of {batch} not divisible into {s} shards")));
        }
        Ok(s)
    }

    fn check_step(&self) -> Result<()> {
        if self.step >= self.total_steps() {
            return Err(PmtError::Schedule {
                step: self.step + 1,
                total: self.total_steps(),
            });
        }
        Ok(())
    }

    /// Backward of one shard's loss (scaled by `1/shards`) into the store,
    /// then the shard's deferred buffer updates.
    fn finish_shard(&mut self, mut tape: Tape<T>, loss: Var, shards: usize) -> Result<()> {
        let v = tape.value(loss).item();
        if !v.is_finite() {
            let op = tape.first_non_finite().map_or("loss", |(_, op)| op);
            return Err(PmtError::NonFiniteLoss { step: self.step, op });
        }
        let scaled = tape.scale(loss, T::lit(1.0 / shards as f64));
        tape.backward_into(scaled, &mut self.store)?;
        for (id, value) in tape.take_buffer_updates() {
            *self.store.value_mut(id) = value;
        }
        Ok(())
    }

    fn apply_update(&mut self, mut loss: LossBreakdown, parts: f64) -> StepRecord {
        let lr = self.learning_rate();
        self.opt.step(&mut self.store, lr);
        self.store.zero_grad();
        let step = self.step;
        self.step += 1;
        loss.total /= parts;
        loss.class /= parts;
        loss.bce /= parts;
        loss.dice /= parts;
        StepRecord {
            step,
            lr,
            loss: loss.total,
            loss_class: loss.class,
            loss_bce: loss.bce,
            loss_dice: loss.dice,
        }
    }

    /// One optimizer step on a batch drawn with replacement from `data`.
    pub fn step_image(&mut self, data: &ImageSet<T>) -> Result<StepRecord> {
        self.check_step()?;
        if data.is_empty() {
            return Err(PmtError::config("empty training set"));
        }
        let b = self.config.train.batch_size;
        let shards = self.shards(b)?;
        let idx: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..data.len())).collect();
        let mut total = LossBreakdown::default();
        for chunk in idx.chunks(b / shards) {
            let mut tape = Tape::new();
            let enc = data.encode(&self.model, &mut tape, &self.store, chunk)?;
            let mode = DecodeMode::Train {
                step: self.step,
                schedule: &self.schedule,
                rng: &mut self.rng,
            };
            let out = self.model.decode(&mut tape, &self.store, &enc, None, mode)?;
            let targets: Vec<Target> = chunk.iter().map(|&i| data.targets[i].clone()).collect();
            let weights = &self.config.loss;
            let matches = match_batch(&tape, &out.last, &targets, weights)?;
            let (loss, br) = segmentation_loss(&mut tape, &out.all_predictions(), &targets, &matches, weights)?;
            total += br;
            self.finish_shard(tape, loss, shards)?;
        }
        Ok(self.apply_update(total, shards as f64))
    }

    /// One optimizer step on `clips_per_batch` clips, back-propagating
    /// through the propagated queries of every frame. Objects keep the query
    /// they were matched to when they first appeared.
    pub fn step_video(&mut self, clips: &[ImageSet<T>]) -> Result<StepRecord> {
        self.check_step()?;
        if clips.is_empty() {
            return Err(PmtError::config("empty clip set"));
        }
        let c = self.config.train.clips_per_batch;
        let shards = self.shards(c)?;
        let idx: Vec<usize> = (0..c).map(|_| self.rng.gen_range(0..clips.len())).collect();
        let mut total = LossBreakdown::default();
        for chunk in idx.chunks(c / shards) {
            let mut tape = Tape::new();
            let frames = chunk.iter().map(|&i| clips[i].len()).min().unwrap_or(0);
            if frames == 0 {
                return Err(PmtError::config("clip without frames"));
            }
            let (loss, br) = self.clip_loss(&mut tape, clips, chunk, frames)?;
            total += br;
            self.finish_shard(tape, loss, shards)?;
        }
        Ok(self.apply_update(total, shards as f64))
    }

    fn clip_loss(&mut self, tape: &mut Tape<T>, clips: &[ImageSet<T>], chunk: &[usize], frames: usize) -> Result<(Var, LossBreakdown)> {
        let mut maps: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); chunk.len()];
        let mut prev: Option<Var> = None;
        let mut acc: Option<Var> = None;
        let mut total = LossBreakdown::default();
        for f in 0..frames {
            let enc = encode_frame(&self.model, tape, &self.store, clips, chunk, f)?;
            let mode = DecodeMode::Train {
                step: self.step,
                schedule: &self.schedule,
                rng: &mut self.rng,
            };
            let out = self.model.decode(tape, &self.store, &enc, prev, mode)?;
            let targets: Vec<Target> = chunk.iter().map(|&i| clips[i].targets[f].clone()).collect();
            let matches = frame_matches(tape, &out, &targets, &mut maps, &self.config.loss)?;
            let (l, br) = segmentation_loss(tape, &out.all_predictions(), &targets, &matches, &self.config.loss)?;
            total += br;
            acc = Some(match acc {
                Some(a) => tape.add(a, l)?,
                None => l,
            });
            prev = Some(out.queries);
        }
        let loss = tape.scale(acc.expect("at least one frame"), T::lit(1.0 / frames as f64));
        let n = frames as f64;
        total.total /= n;
        total.class /= n;
        total.bce /= n;
        total.dice /= n;
        Ok((loss, total))
    }

    /// All parameters and buffers, optimizer moments, step and RNG state.
    pub fn checkpoint(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        checkpoint::push_params(&mut c, &self.store, |_| true)?;
        checkpoint::push_adam(&mut c, &self.store, &self.opt)?;
        push_u64(&mut c, checkpoint::STEP, self.step as u64)?;
        c.push_u32(checkpoint::RNG, checkpoint::rng_words(&self.rng))?;
        Ok(c)
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output; every shape is
    /// validated against `config`.
    pub fn resume(config: &Config, variant: ModelVariant, mode: TrainMode, c: &TensorContainer) -> Result<Self> {
        let mut t = Self::new(config, variant, mode)?;
        checkpoint::load_params(c, &mut t.store, |_| true)?;
        checkpoint::load_adam(c, &t.store, &mut t.opt)?;
        t.step = read_u64(c, checkpoint::STEP)? as usize;
        t.rng = checkpoint::rng_from_words(c.u32s(checkpoint::RNG)?)?;
        if t.step > t.total_steps() {
            return Err(PmtError::Checkpoint(format!(
                "checkpoint at step {} is past the configured {} steps",
                t.step,
                t.total_steps()
            )));
        }
        Ok(t)
    }
}

/// Encoder outputs of frame `f` for each clip in `chunk`.
pub fn encode_frame<T: Float>(
    model: &SegModel,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    clips: &[ImageSet<T>],
    chunk: &[usize],
    f: usize,
) -> Result<Encoded> {
    match chunk.iter().map(|&i| clips[i].features.as_ref().map(|v| &v[f])).collect::<Option<Vec<_>>>() {
        Some(feats) => model.encode_cached(tape, &feats),
        None => {
            let refs: Vec<&Tensor<T>> = chunk.iter().map(|&i| &clips[i].images[f]).collect();
            model.encode(tape, store, &stack_images(&refs)?)
        }
    }
}

/// Persistent clip matching of one frame's final predictions.
pub fn frame_matches<T: Float>(
    tape: &Tape<T>,
    out: &DecoderOutput,
    targets: &[Target],
    maps: &mut [BTreeMap<u32, usize>],
    weights: &crate::config::LossWeights,
) -> Result<Vec<MatchResult>> {
    targets
        .iter()
        .zip(maps.iter_mut())
        .enumerate()
        .map(|(b, (t, map))| video_match(&cost_for_image(tape, &out.last, b, t, weights)?, &t.ids, map))
        .collect()
}
