//! Plain mask decoder: standard Transformer layers over the joint sequence
//! `[queries | class + registers | patches]`, with rotary positions on the
//! patches only, annealed masked attention during training, and the
//! class/mask prediction head.

use pmt_tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{PmtError, Result};
use crate::nn::{init_tensor, Init, LayerNorm, Linear, TransformerLayer};
use crate::rope::{rope_tables, sequence_positions, RopeTables};

/// Per-layer masking probability. The window
/// `[start_frac * total, end_frac * total]` is cut into one sub-window per
/// layer; layer `l` decays linearly from 1 to 0 inside sub-window `l`. An
/// empty window at 0 never masks.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub layers: usize,
    pub total: usize,
    pub start_frac: f64,
    pub end_frac: f64,
}

impl AnnealSchedule {
    pub fn new(cfg: &ModelConfig, layers: usize, total: usize) -> Self {
        AnnealSchedule {
            layers,
            total,
            start_frac: cfg.anneal_start_frac,
            end_frac: cfg.anneal_end_frac,
        }
    }

    pub fn probability(&self, layer: usize, step: usize) -> Result<f64> {
        if step > self.total {
            return Err(PmtError::Schedule {
                step,
                total: self.total,
            });
        }
        let total = self.total as f64;
        let t = step as f64;
        let (s, e) = (self.start_frac * total, self.end_frac * total);
        let width = (e - s) / self.layers.max(1) as f64;
        let a = s + layer as f64 * width;
        let b = a + width;
        Ok(if step == self.total && step > 0 {
            0.0
        } else if t < a {
            1.0
        } else if t >= b {
            0.0
        } else {
            1.0 - (t - a) / width
        })
    }
}

/// Additive attention bias `[B, S, S]` for a sequence laid out as
/// `[K queries | prefix | N patches]`. Query rows get `-inf` on patch
/// columns whose grid logit is `<= 0`; a query with an empty mask keeps an
/// all-zero row, as do all non-query rows.
pub fn masked_attention_bias<T: Float>(grid_logits: &Tensor<T>, prefix: usize) -> Tensor<T> {
    let [b, k, n] = *grid_logits.shape() else {
        panic!("grid logits must be [B, K, N], got {:?}", grid_logits.shape());
    };
    let s = k + prefix + n;
    let mut bias = vec![T::zero(); b * s * s];
    for bi in 0..b {
        for q in 0..k {
            let logits = &grid_logits.data()[(bi * k + q) * n..(bi * k + q + 1) * n];
            if !logits.iter().any(|&v| v > T::zero()) {
                continue;
            }
            let row = &mut bias[(bi * s + q) * s + k + prefix..(bi * s + q + 1) * s];
            for (o, &v) in row.iter_mut().zip(logits) {
                if v <= T::zero() {
                    *o = T::neg_infinity();
                }
            }
        }
    }
    Tensor::new(&[b, s, s], bias).expect("sized buffer")
}

/// One set of query predictions.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `[B, K, C + 1]`; the last column is no-object.
    pub class_logits: Var,
    /// `[B, K, H/4 * W/4]`.
    pub mask_logits: Var,
    /// `[B, K, N]` mask logits on the token grid, used to build attention
    /// masks.
    pub grid_logits: Var,
}

/// Class head plus mask head. Mask embeddings come from a 3-layer MLP on each
/// query; patch features are upscaled to a quarter of the image by stages of
/// pointwise projection and bilinear 2x upsampling.
#[derive(Clone, Debug)]
pub struct MaskModule {
    pub class_head: Linear,
    pub mask_mlp: [Linear; 3],
    pub upscale: Vec<Linear>,
    pub grid: (usize, usize),
    pub mask_grid: (usize, usize),
}

impl MaskModule {
    pub fn new<T: Float>(cfg: &ModelConfig, name: &str, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let lin = |store: &mut ParamStore<T>, n: &str, rng: &mut ChaCha8Rng| Linear::new(store, &format!("{name}.{n}"), d, d, Init::FanIn, rng);
        MaskModule {
            class_head: Linear::new(store, &format!("{name}.class_head"), d, cfg.num_classes + 1, Init::FanIn, rng),
            mask_mlp: [lin(store, "mask_mlp.0", rng), lin(store, "mask_mlp.1", rng), lin(store, "mask_mlp.2", rng)],
            upscale: (0..cfg.upscale_stages()).map(|i| lin(store, &format!("upscale.{i}"), rng)).collect(),
            grid: cfg.grid(),
            mask_grid: cfg.mask_grid(),
        }
    }

    /// `queries: [B, K, D]`, `patches: [B, N, D]`, both normalized.
    ///
    /// The last upscaling stage is linear, so its 2x upsample is applied
    /// after the query dot product instead of before; the result is the same
    /// map at a fraction of the cost, and the pre-upsample product is the
    /// token-grid logit map when there is one stage.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, queries: Var, patches: Var) -> Result<Prediction> {
        let (b, k) = (tape.shape(queries)[0], tape.shape(queries)[1]);
        let d = tape.shape(patches)[2];
        let class_logits = self.class_head.forward(tape, store, queries)?;
        let mut e = queries;
        for (i, l) in self.mask_mlp.iter().enumerate() {
            e = l.forward(tape, store, e)?;
            if i < 2 {
                e = tape.gelu(e);
            }
        }
        let (mut h, mut w) = self.grid;
        let stages = self.upscale.len();
        let mut x = tape.reshape(patches, &[b, h, w, d])?;
        for l in self.upscale.iter().take(stages.saturating_sub(1)) {
            x = l.forward(tape, store, x)?;
            x = tape.upsample2x(x, 1)?;
            x = tape.gelu(x);
            h *= 2;
            w *= 2;
        }
        if let Some(last) = self.upscale.last() {
            x = last.forward(tape, store, x)?;
        }
        let x = tape.reshape(x, &[b, h * w, d])?;
        let xt = tape.transpose(x)?;
        let low = tape.matmul(e, xt)?;
        let (mh, mw) = self.mask_grid;
        let (mask_logits, grid_logits) = if stages == 0 {
            (low, low)
        } else {
            let m = tape.reshape(low, &[b, k, h, w])?;
            let m = tape.upsample2x(m, 2)?;
            let mask = tape.reshape(m, &[b, k, mh * mw])?;
            let grid = if stages == 1 {
                low
            } else {
                let g = tape.resize_bilinear(m, 2, self.grid.0, self.grid.1)?;
                tape.reshape(g, &[b, k, self.grid.0 * self.grid.1])?
            };
            (mask, grid)
        };
        Ok(Prediction {
            class_logits,
            mask_logits,
            grid_logits,
        })
    }
}

/// Train mode draws one Bernoulli per layer from `rng`; eval mode never
/// touches the schedule.
pub enum DecodeMode<'a> {
    Eval,
    Train {
        step: usize,
        schedule: &'a AnnealSchedule,
        rng: &'a mut ChaCha8Rng,
    },
}

impl DecodeMode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, DecodeMode::Train { .. })
    }
}

pub struct DecoderOutput {
    /// Output queries before the head norm, `[B, K, D]`.
    pub queries: Var,
    /// Output patch tokens before the head norm, `[B, N, D]`.
    pub patches: Var,
    /// One prediction set per layer input (train mode only).
    pub intermediate: Vec<Prediction>,
    pub last: Prediction,
    /// Whether masked attention was applied at each layer.
    pub masked_layers: Vec<bool>,
}

impl DecoderOutput {
    /// Intermediate sets followed by the final one.
    pub fn all_predictions(&self) -> Vec<Prediction> {
        let mut v = self.intermediate.clone();
        v.push(self.last);
        v
    }
}

/// Shared layer loop for the decoder and the injection baseline: runs
/// `layers` over `x = [K queries | prefix | N patches]`, predicting from
/// `norm(x)` before each layer in train mode to build the mask bias and the
/// deep-supervision targets.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_joint_layers<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layers: &[TransformerLayer],
    norm: &LayerNorm,
    head: &MaskModule,
    mut x: Var,
    k: usize,
    prefix: usize,
    rope: Option<&RopeTables<T>>,
    mut mode: DecodeMode<'_>,
) -> Result<DecoderOutput> {
    let n = tape.shape(x)[1] - k - prefix;
    let predict = |tape: &mut Tape<T>, x: Var| -> Result<Prediction> {
        let xn = norm.forward(tape, store, x)?;
        let q = tape.narrow(xn, 1, 0, k)?;
        let p = tape.narrow(xn, 1, k + prefix, n)?;
        head.forward(tape, store, q, p)
    };
    let mut intermediate = Vec::new();
    let mut masked_layers = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let bias = match &mut mode {
            DecodeMode::Eval => None,
            DecodeMode::Train { step, schedule, rng } => {
                let pred = predict(tape, x)?;
                intermediate.push(pred);
                let p = schedule.probability(l, *step)?;
                let apply = rng.gen::<f64>() < p;
                masked_layers.push(apply);
                apply.then(|| masked_attention_bias(tape.value(pred.grid_logits), prefix))
            }
        };
        x = layer.forward(tape, store, x, rope, bias.as_ref())?;
    }
    let last = predict(tape, x)?;
    Ok(DecoderOutput {
        queries: tape.narrow(x, 1, 0, k)?,
        patches: tape.narrow(x, 1, k + prefix, n)?,
        intermediate,
        last,
        masked_layers,
    })
}

#[derive(Clone, Debug)]
pub struct PlainMaskDecoder {
    pub queries: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub head: MaskModule,
    pub use_rope: bool,
    pub grid: (usize, usize),
    pub head_dim: usize,
    pub rope_base: f64,
}

impl PlainMaskDecoder {
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        PlainMaskDecoder {
            queries: store.add("decoder.queries", init_tensor(&[cfg.num_queries, d], d, Init::Normal(0.02), rng)),
            layers: (0..cfg.decoder_layers)
                .map(|i| {
                    TransformerLayer::new(store, &format!("decoder.layers.{i}"), d, cfg.num_heads, cfg.decoder_ffn_expansion, rng)
                })
                .collect(),
            norm: LayerNorm::new(store, "decoder.norm", d),
            head: MaskModule::new(cfg, "decoder.head", store, rng),
            use_rope: cfg.decoder_rope,
            grid: cfg.grid(),
            head_dim: cfg.head_dim(),
            rope_base: cfg.rope_base,
        }
    }

    pub fn num_queries<T: Float>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.queries).shape()[0]
    }

    /// Learned queries broadcast over the batch.
    pub fn learned_queries<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: usize) -> Var {
        let q = tape.param(store, self.queries);
        tape.expand_batch(q, batch)
    }

    pub fn rope<T: Float>(&self, k: usize, prefix: usize) -> Result<Option<RopeTables<T>>> {
        if !self.use_rope {
            return Ok(None);
        }
        let pos = sequence_positions(k + prefix, self.grid.0, self.grid.1, (0.0, 0.0));
        Ok(Some(rope_tables(&pos, self.head_dim, self.rope_base)?))
    }

    /// `fused: [B, N, D]`, `prefix: [B, P, D]` (class and register tokens),
    /// `queries_in: [B, K, D]`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fused: Var,
        prefix: Var,
        queries_in: Var,
        mode: DecodeMode<'_>,
    ) -> Result<DecoderOutput> {
        let n = tape.shape(fused)[1];
        if n != self.grid.0 * self.grid.1 {
            return Err(PmtError::config(format!(
                "decoder expects {} patch tokens, got {n}",
                self.grid.0 * self.grid.1
            )));
        }
        let k = tape.shape(queries_in)[1];
        let p = tape.shape(prefix)[1];
        let rope = self.rope(k, p)?;
        let x = tape.concat(&[queries_in, prefix, fused], 1)?;
        run_joint_layers(tape, store, &self.layers, &self.norm, &self.head, x, k, p, rope.as_ref(), mode)
    }
}
