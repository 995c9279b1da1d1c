//! Finite-difference checks of the model: one decoder layer and the full
//! encoder, decoder, matching and loss composition, in f64 on a tiny config.

use pmt_tensor::opsuite::{op_cases, run_case};
use pmt_tensor::{grad_check, GradCheckError, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serde::Serialize;

use crate::config::{Config, SyntheticSpec};
use crate::data::synth::generate_image;
use crate::decoder::{AnnealSchedule, DecodeMode};
use crate::loss::{match_batch, segmentation_loss, Target};
use crate::model::{ModelVariant, SegModel};
use crate::nn::TransformerLayer;
use crate::rope::{rope_tables, sequence_positions};
use crate::train::stack_images;

/// 16x16 images, 2x2 patch grid, two encoder and two decoder layers, five queries.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    let m = &mut c.model;
    m.image_height = 16;
    m.image_width = 16;
    m.patch_size = 8;
    m.embed_dim = 8;
    m.num_layers = 2;
    m.num_heads = 2;
    m.num_register_tokens = 1;
    m.ffn_expansion = 2;
    m.tap_layers = vec![1, 2];
    m.num_queries = 5;
    m.decoder_layers = 2;
    m.eomt_split = [1, 1];
    c.data = SyntheticSpec {
        image_size: 16,
        min_instances: 1,
        max_instances: 2,
        min_area: 4,
        min_radius: 3.0,
        max_radius: 6.0,
        ..SyntheticSpec::default()
    };
    c.train.steps = 10;
    c
}

fn tensor_err(e: crate::PmtError) -> TensorError {
    TensorError::invalid("model", e.to_string())
}

/// Gradient check of one joint-sequence decoder layer with rotary positions
/// and a random attention mask on the query rows.
pub fn layer_grad_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let (d, k, prefix, grid) = (8, 2, 1, (2, 2));
    let t = k + prefix + grid.0 * grid.1;
    let layer = TransformerLayer::new(&mut store, "layer", d, 2, 2, &mut rng);
    let x = store.add("x", Tensor::from_fn(&[1, t, d], |_| rng.gen_range(-1.0..1.0)));
    let rope = rope_tables::<f64>(&sequence_positions(k + prefix, grid.0, grid.1, (0.0, 0.0)), d / 2, 100.0).map_err(tensor_err)?;
    let mut bias = Tensor::zeros(&[1, t, t]);
    for q in 0..k {
        for j in k + prefix..t {
            if rng.gen_bool(0.4) {
                bias.data_mut()[q * t + j] = f64::NEG_INFINITY;
            }
        }
    }
    let w = Tensor::from_fn(&[1, t, d], |_| rng.gen_range(-1.0..1.0));
    grad_check(
        &mut store,
        |tape, s| {
            let xv = tape.param(s, x);
            let y = layer.forward(tape, s, xv, Some(&rope), Some(&bias)).map_err(tensor_err)?;
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv)?;
            Ok(tape.sum(p))
        },
        opts,
    )
}

/// Full training loss of `variant` on two synthetic images, differentiated
/// with respect to every trainable parameter. `masked` runs every decoder
/// layer with masked attention; otherwise none. `train_encoder` lifts the
/// freeze so encoder gradients are checked too.
pub fn model_grad_check(
    seed: u64,
    variant: ModelVariant,
    masked: bool,
    train_encoder: bool,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError> {
    let mut cfg = tiny_config();
    cfg.model.freeze_encoder = !train_encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let model = SegModel::new(&cfg.model, variant, &mut store, &mut rng).map_err(tensor_err)?;
    let samples: Vec<_> = (0..2).map(|_| generate_image(&cfg.data, &mut rng)).collect();
    let images: Vec<Tensor<f64>> = samples.iter().map(|s| s.image.cast()).collect();
    let images = stack_images(&images.iter().collect::<Vec<_>>()).map_err(tensor_err)?;
    let targets = samples
        .iter()
        .map(|s| Target::from_panoptic(&s.panoptic, cfg.model.mask_grid()))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(tensor_err)?;
    let total = cfg.train.steps;
    let schedule = AnnealSchedule::new(&model.cfg, model.decoder_depth(), total);
    let step = if masked { 0 } else { total };
    let f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> Result<Var, TensorError> {
        let run = |tape: &mut Tape<f64>| -> crate::Result<Var> {
            let mut draws = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let enc = model.encode(tape, s, &images)?;
            let mode = DecodeMode::Train {
                step,
                schedule: &schedule,
                rng: &mut draws,
            };
            let out = model.decode(tape, s, &enc, None, mode)?;
            let matches = match_batch(tape, &out.last, &targets, &cfg.loss)?;
            Ok(segmentation_loss(tape, &out.all_predictions(), &targets, &matches, &cfg.loss)?.0)
        };
        run(tape).map_err(tensor_err)
    };
    grad_check(&mut store, f, opts)
}

/// Worst relative error of one group of checks.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: u64,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Every tape op case, the decoder layer, and the full loss of both heads
/// (masked or not, encoder frozen or not, alternating by seed), each over
/// `instances` seeds. `on_entry` sees each group as it finishes.
pub fn gradient_suite(instances: u64, mut on_entry: impl FnMut(&SuiteEntry)) -> Result<Vec<SuiteEntry>, GradCheckError> {
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    let mut push = |e: SuiteEntry, out: &mut Vec<SuiteEntry>| {
        on_entry(&e);
        out.push(e);
    };
    for case in op_cases() {
        let r = run_case(&case, instances, &opts)?;
        push(
            SuiteEntry {
                name: format!("op {}", case.name),
                instances,
                max_rel_err: r.max_rel_err,
                coords_checked: r.coords_checked,
            },
            &mut out,
        );
    }
    let mut layer = SuiteEntry {
        name: "decoder layer".into(),
        instances,
        max_rel_err: 0.0,
        coords_checked: 0,
    };
    for seed in 0..instances {
        let r = layer_grad_check(seed, &opts)?;
        layer.max_rel_err = layer.max_rel_err.max(r.max_rel_err);
        layer.coords_checked += r.coords_checked;
    }
    push(layer, &mut out);
    let capped = GradCheckOptions {
        max_coords: Some(24),
        ..opts
    };
    for variant in [ModelVariant::Pmt, ModelVariant::EomtFrozen] {
        let mut e = SuiteEntry {
            name: format!("{variant} loss"),
            instances,
            max_rel_err: 0.0,
            coords_checked: 0,
        };
        for seed in 0..instances {
            let r = model_grad_check(seed, variant, seed % 2 == 0, seed % 4 < 2, &capped)?;
            e.max_rel_err = e.max_rel_err.max(r.max_rel_err);
            e.coords_checked += r.coords_checked;
        }
        push(e, &mut out);
    }
    Ok(out)
}
