use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pmt_core::check::gradient_suite;
use pmt_core::data::checkpoint::load_params;
use pmt_core::data::container::TensorContainer;
use pmt_core::data::synth::{clip_split, image_split, ClipSample, ImageSample, Split};
use pmt_core::decoder::DecodeMode;
use pmt_core::eval::{evaluate_clips, evaluate_images, ImageMetrics};
use pmt_core::metrics::panoptic::PanopticMap;
use pmt_core::pretrain::pretrain_encoder;
use pmt_core::train::{stack_images, ImageSet, TrainMode, Trainer};
use pmt_core::{Config, ModelVariant};
use pmt_tensor::Tape;
use serde_json::json;

use crate::dataset::write_split;
use crate::{BenchArgs, Common, GradcheckArgs, TrainArgs};

fn log(value: serde_json::Value) {
    eprintln!("{value}");
}

fn load_config(a: &Common) -> Result<Config> {
    let path = a.config.as_ref().context("--config is required for this command")?;
    let mut c = Config::load(path)?;
    if let Some(s) = a.seed {
        c.train.seed = s;
    }
    if let Some(s) = a.steps {
        c.train.steps = s;
    }
    c.validate()?;
    Ok(c)
}

fn out_path(a: &Common) -> Result<&Path> {
    a.out.as_deref().context("--out is required for this command")
}

fn read_checkpoint(path: &PathBuf) -> Result<TensorContainer> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    TensorContainer::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn split_of(a: &Common, default: Split) -> Result<Split> {
    match &a.split {
        None => Ok(default),
        Some(s) => Split::parse(s).with_context(|| format!("unknown split {s:?} (expected train or val)")),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
    }
}

pub fn gen_data(a: &Common) -> Result<ExitCode> {
    let config = load_config(a)?;
    let dir = out_path(a)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mode = TrainMode::parse(&a.mode)?;
    let splits = match &a.split {
        None => vec![Split::Train, Split::Val],
        Some(_) => vec![split_of(a, Split::Val)?],
    };
    for split in splits {
        let name = split_name(split);
        let count = match mode {
            TrainMode::Image => {
                let images = image_split(&config.data, split);
                let groups: Vec<&[ImageSample]> = images.iter().map(std::slice::from_ref).collect();
                write_split(dir, &format!("images_{name}"), &groups)?;
                images.len()
            }
            TrainMode::Video => {
                let clips = clip_split(&config.data, split);
                let groups: Vec<&[ImageSample]> = clips.iter().map(|c| c.frames.as_slice()).collect();
                write_split(dir, &format!("clips_{name}"), &groups)?;
                clips.len()
            }
        };
        println!("{}", json!({"split": name, "mode": a.mode, "samples": count, "dir": dir.display().to_string()}));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn pretrain(a: &Common) -> Result<ExitCode> {
    let mut config = load_config(a)?;
    if let Some(s) = a.steps {
        config.train.pretrain_steps = s;
    }
    let out = out_path(a)?;
    let train = image_split(&config.data, Split::Train);
    let val = image_split(&config.data, Split::Val);
    let every = config.train.log_every.max(1);
    let total = config.train.pretrain_steps;
    let pre = pretrain_encoder::<f32>(&config, &train, |r| {
        if r.step % every == 0 || r.step == total {
            log(json!({"phase": "pretrain", "step": r.step, "lr": r.lr, "loss": r.loss, "accuracy": r.accuracy}));
        }
    })?;
    let acc = pre.accuracy(&val)?;
    pre.encoder_checkpoint()?.save(out)?;
    println!("{}", json!({"val_accuracy": acc, "checkpoint": out.display().to_string()}));
    Ok(ExitCode::SUCCESS)
}

fn image_metrics(trainer: &Trainer<f32>, samples: &[ImageSample]) -> Result<ImageMetrics> {
    let set = ImageSet::new(samples, &trainer.model, &trainer.store)?;
    let gts: Vec<PanopticMap> = samples.iter().map(|s| s.panoptic.clone()).collect();
    Ok(evaluate_images(&trainer.model, &trainer.store, &set, &gts, &trainer.config.inference)?)
}

fn video_metrics(trainer: &Trainer<f32>, clips: &[ClipSample]) -> Result<serde_json::Value> {
    let sets = clip_sets(trainer, clips)?;
    let gts: Vec<Vec<PanopticMap>> = clips.iter().map(|c| c.frames.iter().map(|f| f.panoptic.clone()).collect()).collect();
    let m = evaluate_clips(&trainer.model, &trainer.store, &sets, &gts, &trainer.config.inference, &trainer.config.loss)?;
    Ok(serde_json::to_value(m)?)
}

fn clip_sets(trainer: &Trainer<f32>, clips: &[ClipSample]) -> Result<Vec<ImageSet<f32>>> {
    Ok(clips
        .iter()
        .map(|c| ImageSet::new(&c.frames, &trainer.model, &trainer.store))
        .collect::<pmt_core::Result<Vec<_>>>()?)
}

pub fn train(args: &TrainArgs) -> Result<ExitCode> {
    let a = &args.common;
    let config = load_config(a)?;
    let out = out_path(a)?;
    let variant = ModelVariant::parse(&a.model)?;
    let mode = TrainMode::parse(&a.mode)?;
    let mut trainer = match &args.resume {
        Some(p) => Trainer::<f32>::resume(&config, variant, mode, &read_checkpoint(p)?)?,
        None => {
            let mut t = Trainer::<f32>::new(&config, variant, mode)?;
            if let Some(p) = &a.checkpoint {
                let n = t.load_available(&read_checkpoint(p)?)?;
                log(json!({"phase": "init", "checkpoint": p.display().to_string(), "tensors_loaded": n}));
            }
            t
        }
    };
    // Frozen features are cached from the weights loaded above.
    let every = config.train.log_every.max(1);
    let total = trainer.total_steps();
    let started = Instant::now();
    match mode {
        TrainMode::Image => {
            let set = ImageSet::new(&image_split(&config.data, Split::Train), &trainer.model, &trainer.store)?;
            let val = image_split(&config.data, Split::Val);
            while trainer.step < total {
                let r = trainer.step_image(&set)?;
                if trainer.step % every == 0 || trainer.step == total {
                    log(serde_json::to_value(&r)?);
                }
                if config.train.eval_every > 0 && trainer.step % config.train.eval_every == 0 {
                    log(json!({"phase": "eval", "step": trainer.step, "metrics": image_metrics(&trainer, &val)?}));
                }
            }
        }
        TrainMode::Video => {
            let sets = clip_sets(&trainer, &clip_split(&config.data, Split::Train))?;
            let val = clip_split(&config.data, Split::Val);
            while trainer.step < total {
                let r = trainer.step_video(&sets)?;
                if trainer.step % every == 0 || trainer.step == total {
                    log(serde_json::to_value(&r)?);
                }
                if config.train.eval_every > 0 && trainer.step % config.train.eval_every == 0 {
                    log(json!({"phase": "eval", "step": trainer.step, "metrics": video_metrics(&trainer, &val)?}));
                }
            }
        }
    }
    trainer.checkpoint()?.save(out)?;
    println!(
        "{}",
        json!({"model": variant.name(), "mode": a.mode, "steps": trainer.step, "seconds": started.elapsed().as_secs_f64(), "checkpoint": out.display().to_string()})
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: &Common) -> Result<ExitCode> {
    let config = load_config(a)?;
    let variant = ModelVariant::parse(&a.model)?;
    let mode = TrainMode::parse(&a.mode)?;
    let path = a.checkpoint.as_ref().context("--checkpoint is required for eval")?;
    let mut trainer = Trainer::<f32>::new(&config, variant, mode)?;
    load_params(&read_checkpoint(path)?, &mut trainer.store, |_| true)?;
    let split = split_of(a, Split::Val)?;
    let metrics = match mode {
        TrainMode::Image => serde_json::to_value(image_metrics(&trainer, &image_split(&config.data, split))?)?,
        TrainMode::Video => video_metrics(&trainer, &clip_split(&config.data, split))?,
    };
    println!("{}", json!({"model": variant.name(), "mode": a.mode, "split": split_name(split), "metrics": metrics}));
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let entries = gradient_suite(a.instances, |e| {
        let ok = e.max_rel_err < a.tolerance;
        println!("{}", json!({"check": e.name, "instances": e.instances, "max_rel_err": e.max_rel_err, "coords": e.coords_checked, "pass": ok}));
    })?;
    let failed = entries.iter().filter(|e| !(e.max_rel_err < a.tolerance)).count();
    println!("{}", json!({"groups": entries.len(), "failed": failed, "tolerance": a.tolerance}));
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn bench(a: &BenchArgs) -> Result<ExitCode> {
    let config = load_config(&a.common)?;
    let variant = ModelVariant::parse(&a.common.model)?;
    let trainer = Trainer::<f32>::new(&config, variant, TrainMode::Image)?;
    let mut spec = config.data.clone();
    spec.val_images = 1;
    let sample = image_split(&spec, Split::Val);
    let image = stack_images(&[&sample[0].image])?;
    let forward = || -> pmt_core::Result<()> {
        let mut tape = Tape::<f32>::inference();
        let enc = trainer.model.encode(&mut tape, &trainer.store, &image)?;
        trainer.model.decode(&mut tape, &trainer.store, &enc, None, DecodeMode::Eval)?;
        Ok(())
    };
    for _ in 0..a.warmup {
        forward()?;
    }
    let mut ms = Vec::with_capacity(a.runs as usize);
    for _ in 0..a.runs {
        let t = Instant::now();
        forward()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let std = (ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    println!("{}", json!({"model": variant.name(), "runs": a.runs, "warmup": a.warmup, "mean_ms": mean, "std_ms": std}));
    Ok(ExitCode::SUCCESS)
}

/// Rows in step order: the injection baseline, a separate decoder on the
/// final layer, then lateral connections, then the RoPE ablation of the
/// full model.
const ABLATION: [(ModelVariant, &str); 4] = [
    (ModelVariant::EomtFrozen, "queries injected into the frozen encoder"),
    (ModelVariant::PmtNoLateral, "separate decoder on the final layer"),
    (ModelVariant::Pmt, "+ lateral connections"),
    (ModelVariant::PmtNoRope, "full model without decoder RoPE"),
];

pub fn ablate(a: &Common) -> Result<ExitCode> {
    let config = load_config(a)?;
    let train = image_split(&config.data, Split::Train);
    let val = image_split(&config.data, Split::Val);
    let encoder = match &a.checkpoint {
        Some(p) => read_checkpoint(p)?,
        None => {
            log(json!({"phase": "pretrain", "steps": config.train.pretrain_steps}));
            pretrain_encoder::<f32>(&config, &train, |_| {})?.encoder_checkpoint()?
        }
    };
    let mut rows = Vec::new();
    for (step, (variant, change)) in ABLATION.iter().enumerate() {
        let started = Instant::now();
        let mut t = Trainer::<f32>::new(&config, *variant, TrainMode::Image)?;
        t.load_encoder(&encoder)?;
        let set = ImageSet::new(&train, &t.model, &t.store)?;
        while t.step < t.total_steps() {
            t.step_image(&set)?;
        }
        let m = image_metrics(&t, &val)?;
        let row = json!({
            "step": step,
            "model": variant.name(),
            "change": change,
            "pq": m.pq_value(),
            "miou": m.miou.as_ref().map(|r| r.miou),
            "ap": m.ap.as_ref().map(|r| r.ap),
            "seconds": started.elapsed().as_secs_f64(),
        });
        log(row.clone());
        rows.push((step, *variant, *change, m));
    }
    println!("| step | model | change | PQ | mIoU | AP |");
    println!("|---|---|---|---|---|---|");
    for (step, variant, change, m) in &rows {
        println!(
            "| {step} | {variant} | {change} | {:.3} | {:.3} | {:.3} |",
            m.pq_value(),
            m.miou.as_ref().map_or(0.0, |r| r.miou),
            m.ap.as_ref().map_or(0.0, |r| r.ap)
        );
    }
    if let Some(out) = &a.out {
        let json: Vec<_> = rows
            .iter()
            .map(|(step, v, change, m)| json!({"step": step, "model": v.name(), "change": change, "metrics": m}))
            .collect();
        std::fs::write(out, serde_json::to_string_pretty(&json)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}
