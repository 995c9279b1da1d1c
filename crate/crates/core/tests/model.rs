use pmt_core::check::tiny_config;
use pmt_core::config::Config;
use pmt_core::data::container::TensorContainer;
use pmt_core::data::synth::{clip_split, generate_image, image_split, ImageSample, Split};
use pmt_core::decoder::{AnnealSchedule, DecodeMode};
use pmt_core::eval::{predict_clips, predict_images};
use pmt_core::loss::{match_batch, segmentation_loss, Target};
use pmt_core::matching::MatchResult;
use pmt_core::model::{encoder_checksum, Head};
use pmt_core::train::{stack_images, ImageSet, TrainMode, Trainer};
use pmt_core::{ModelVariant, SegModel};
use pmt_tensor::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_run_config() -> Config {
    let mut c = tiny_config();
    c.data.train_images = 8;
    c.data.val_images = 4;
    c.data.train_clips = 2;
    c.data.val_clips = 2;
    c.data.frames = 3;
    c.train.steps = 3;
    c.train.batch_size = 2;
    c.train.clips_per_batch = 2;
    c.train.warmup_steps = 1;
    c
}

fn model_and_batch(seed: u64) -> (Config, SegModel, ParamStore<f64>, Tensor<f64>, Vec<Target>) {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = SegModel::new(&cfg.model, ModelVariant::Pmt, &mut store, &mut rng).unwrap();
    let samples: Vec<ImageSample> = (0..2).map(|_| generate_image(&cfg.data, &mut rng)).collect();
    let images: Vec<Tensor<f64>> = samples.iter().map(|s| s.image.cast()).collect();
    let images = stack_images(&images.iter().collect::<Vec<_>>()).unwrap();
    let targets = samples
        .iter()
        .map(|s| Target::from_panoptic(&s.panoptic, cfg.model.mask_grid()).unwrap())
        .collect();
    (cfg, model, store, images, targets)
}

fn permute_target(t: &Target, perm: &[usize]) -> Target {
    let p = t.mask_grid.0 * t.mask_grid.1;
    Target {
        classes: perm.iter().map(|&g| t.classes[g]).collect(),
        ids: perm.iter().map(|&g| t.ids[g]).collect(),
        masks: perm.iter().flat_map(|&g| t.masks[g * p..(g + 1) * p].to_vec()).collect(),
        mask_grid: t.mask_grid,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_ignores_target_order(seed in 0u64..1000, rot in 1usize..4) {
        let (cfg, model, store, images, targets) = model_and_batch(seed);
        let permuted: Vec<Target> = targets
            .iter()
            .map(|t| {
                let mut perm: Vec<usize> = (0..t.len()).rev().collect();
                let r = rot % perm.len().max(1);
                perm.rotate_left(r);
                permute_target(t, &perm)
            })
            .collect();
        let loss = |targets: &[Target]| {
            let mut tape = Tape::inference();
            let enc = model.encode(&mut tape, &store, &images).unwrap();
            let out = model.decode(&mut tape, &store, &enc, None, DecodeMode::Eval).unwrap();
            let m: Vec<MatchResult> = match_batch(&tape, &out.last, targets, &cfg.loss).unwrap();
            let (l, _) = segmentation_loss(&mut tape, &out.all_predictions(), targets, &m, &cfg.loss).unwrap();
            tape.value(l).data()[0]
        };
        let (a, b) = (loss(&targets), loss(&permuted));
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{} vs {}", a, b);
    }
}

#[test]
fn train_decoding_without_masking_equals_eval() {
    let (cfg, model, store, images, _) = model_and_batch(5);
    let Head::Pmd { lateral, decoder, .. } = &model.head else {
        panic!("expected the plain mask decoder");
    };
    let total = cfg.train.steps;
    let schedule = AnnealSchedule::new(&model.cfg, model.decoder_depth(), total);
    let run = |train: bool| {
        let mut tape = Tape::inference();
        let enc = model.encode(&mut tape, &store, &images).unwrap();
        let fused = lateral.forward(&mut tape, &store, &enc.taps, &model.encoder.final_ln, false).unwrap();
        let q = decoder.learned_queries(&mut tape, &store, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mode = if train {
            DecodeMode::Train {
                step: total,
                schedule: &schedule,
                rng: &mut rng,
            }
        } else {
            DecodeMode::Eval
        };
        let out = decoder.forward(&mut tape, &store, fused, enc.prefix, q, mode).unwrap();
        (tape.value(out.last.class_logits).clone(), tape.value(out.last.mask_logits).clone())
    };
    assert_eq!(run(true), run(false));
}

fn train_images(config: &Config, steps: usize) -> Trainer<f32> {
    let mut t = Trainer::<f32>::new(config, ModelVariant::Pmt, TrainMode::Image).unwrap();
    let set = ImageSet::new(&image_split(&config.data, Split::Train), &t.model, &t.store).unwrap();
    for _ in 0..steps {
        t.step_image(&set).unwrap();
    }
    t
}

#[test]
fn frozen_encoder_is_untouched_by_training() {
    let mut config = small_run_config();
    config.model.freeze_encoder = true;
    let before = encoder_checksum(&Trainer::<f32>::new(&config, ModelVariant::Pmt, TrainMode::Image).unwrap().store);
    assert_eq!(encoder_checksum(&train_images(&config, 3).store), before);

    config.model.freeze_encoder = false;
    assert_ne!(encoder_checksum(&train_images(&config, 3).store), before);
}

#[test]
fn first_frame_matches_the_image_path() {
    let config = small_run_config();
    let mut t = Trainer::<f32>::new(&config, ModelVariant::Pmt, TrainMode::Video).unwrap();
    let clips: Vec<ImageSet<f32>> = clip_split(&config.data, Split::Train)
        .iter()
        .map(|c| ImageSet::new(&c.frames, &t.model, &t.store).unwrap())
        .collect();
    for _ in 0..2 {
        t.step_video(&clips).unwrap();
    }
    let val = clip_split(&config.data, Split::Val);
    let sets: Vec<ImageSet<f32>> = val.iter().map(|c| ImageSet::new(&c.frames, &t.model, &t.store).unwrap()).collect();
    let idx: Vec<usize> = (0..sets.len()).collect();
    let video = predict_clips(&t.model, &t.store, &sets, &idx).unwrap();
    let first: Vec<ImageSample> = val.iter().map(|c| c.frames[0].clone()).collect();
    let first = ImageSet::new(&first, &t.model, &t.store).unwrap();
    let image = predict_images(&t.model, &t.store, &first, &idx).unwrap();
    for (v, i) in video.scores.iter().zip(&image) {
        assert_eq!(v[0].class_probs, i.class_probs);
        assert_eq!(v[0].mask_probs, i.mask_probs);
    }
}

#[test]
fn checkpoint_file_round_trip_resumes_identically() {
    let config = small_run_config();
    let full = train_images(&config, 3).checkpoint().unwrap().to_bytes();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.pmtc");
    train_images(&config, 1).checkpoint().unwrap().save(&path).unwrap();
    let mut t = Trainer::<f32>::resume(&config, ModelVariant::Pmt, TrainMode::Image, &TensorContainer::load(&path).unwrap()).unwrap();
    let set = ImageSet::new(&image_split(&config.data, Split::Train), &t.model, &t.store).unwrap();
    while t.step < 3 {
        t.step_image(&set).unwrap();
    }
    assert_eq!(t.checkpoint().unwrap().to_bytes(), full);
}

#[test]
fn missing_checkpoint_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(TensorContainer::load(dir.path().join("absent.pmtc")).is_err());
}
