//! Full segmentation model: encoder plus one of the two heads (plain mask
//! decoder with lateral fusion, or the frozen-injection baseline).

use std::hash::{Hash, Hasher};

use pmt_tensor::{Float, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{DecodeMode, DecoderOutput, PlainMaskDecoder};
use crate::encoder::{Encoder, PREFIX};
use crate::eomt::EomtBaseline;
use crate::error::{PmtError, Result};
use crate::lateral::Lateral;
use crate::temporal::QueryPropagation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    EomtFrozen,
    Pmt,
    PmtNoLateral,
    PmtNoRope,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::EomtFrozen,
        ModelVariant::PmtNoLateral,
        ModelVariant::PmtNoRope,
        ModelVariant::Pmt,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "eomt-frozen" => ModelVariant::EomtFrozen,
            "pmt" => ModelVariant::Pmt,
            "pmt-nolateral" => ModelVariant::PmtNoLateral,
            "pmt-norope" => ModelVariant::PmtNoRope,
            _ => {
                return Err(PmtError::config(format!(
                    "unknown model {s:?} (expected eomt-frozen, pmt, pmt-nolateral or pmt-norope)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::EomtFrozen => "eomt-frozen",
            ModelVariant::Pmt => "pmt",
            ModelVariant::PmtNoLateral => "pmt-nolateral",
            ModelVariant::PmtNoRope => "pmt-norope",
        }
    }

    /// Config actually used by this variant. Without lateral connections the
    /// decoder sees only the final encoder layer; without RoPE the decoder
    /// runs position-free (the encoder keeps its own rotary positions).
    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match self {
            ModelVariant::PmtNoLateral => c.tap_layers = vec![c.num_layers],
            ModelVariant::PmtNoRope => c.decoder_rope = false,
            ModelVariant::EomtFrozen => c.freeze_encoder = true,
            ModelVariant::Pmt => {}
        }
        c
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Pmd {
        lateral: Lateral,
        decoder: PlainMaskDecoder,
        propagation: QueryPropagation,
    },
    Eomt(EomtBaseline),
}

/// Encoder outputs consumed by the heads.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Raw patch tokens per tap layer, `[B, N, D]`.
    pub taps: Vec<Var>,
    /// Normalized class/register tokens of the last layer, `[B, P, D]`.
    pub prefix: Var,
    /// Full sequence after the first `L1` layers (baseline only).
    pub tokens_l1: Option<Var>,
}

/// Per-image frozen encoder features, so a frozen encoder runs once per
/// sample instead of once per step.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache<T> {
    /// `[N, D]` per tap layer.
    pub taps: Vec<Tensor<T>>,
    /// `[P, D]`.
    pub prefix: Tensor<T>,
    /// `[P + N, D]`.
    pub tokens_l1: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: ModelConfig,
    pub variant: ModelVariant,
    pub encoder: Encoder,
    pub head: Head,
}

impl SegModel {
    /// Registers all parameters in `store`. The encoder is created first so
    /// its initialization does not depend on the variant.
    pub fn new<T: Float>(cfg: &ModelConfig, variant: ModelVariant, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cfg = variant.apply(cfg);
        cfg.validate()?;
        let encoder = Encoder::new(&cfg, store, rng);
        let head = match variant {
            ModelVariant::EomtFrozen => Head::Eomt(EomtBaseline::new(&cfg, store, rng)),
            _ => Head::Pmd {
                lateral: Lateral::new(&cfg.tap_layers, cfg.embed_dim, store, rng),
                decoder: PlainMaskDecoder::new(&cfg, store, rng),
                propagation: QueryPropagation::new(cfg.embed_dim, store, rng),
            },
        };
        if cfg.freeze_encoder {
            store.set_requires_grad_prefix(PREFIX, false);
        }
        Ok(SegModel { cfg, variant, encoder, head })
    }

    pub fn num_queries(&self) -> usize {
        self.cfg.num_queries
    }

    /// Whether the head consumes the sequence after `L1` layers.
    fn needs_l1(&self) -> bool {
        matches!(self.head, Head::Eomt(_))
    }

    fn taps(&self) -> &[usize] {
        match &self.head {
            Head::Pmd { lateral, .. } => &lateral.tap_layers,
            Head::Eomt(_) => &[],
        }
    }

    /// Runs the encoder on the tape; frozen parameters enter as constants.
    pub fn encode<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Encoded> {
        if let Head::Eomt(e) = &self.head {
            let rope = self.encoder.rope(0)?;
            let x = self.encoder.embed(tape, store, images)?;
            let x = self.encoder.run_layers(tape, store, x, 0..e.split[0], &rope)?;
            let rest = self.encoder.run_layers(tape, store, x, e.split[0]..self.cfg.num_layers, &rope)?;
            let normed = self.encoder.final_ln.forward(tape, store, rest)?;
            let prefix = tape.narrow(normed, 1, 0, self.encoder.prefix_len())?;
            return Ok(Encoded {
                taps: Vec::new(),
                prefix,
                tokens_l1: Some(x),
            });
        }
        let out = self.encoder.forward(tape, store, images, self.taps())?;
        let prefix = tape.narrow(out.final_normed, 1, 0, self.encoder.prefix_len())?;
        Ok(Encoded {
            taps: out.taps,
            prefix,
            tokens_l1: None,
        })
    }

    /// Frozen-encoder features for each image of `images: [B, 3, H, W]`.
    pub fn features<T: Float>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<FeatureCache<T>>> {
        let mut tape = Tape::inference();
        let enc = self.encode(&mut tape, store, images)?;
        let b = images.shape()[0];
        let split = |v: &Tensor<T>| -> Vec<Tensor<T>> {
            let s = v.shape();
            let per = s[1] * s[2];
            (0..b)
                .map(|i| Tensor::new(&s[1..], v.data()[i * per..(i + 1) * per].to_vec()).expect("slice"))
                .collect()
        };
        let taps: Vec<Vec<Tensor<T>>> = enc.taps.iter().map(|&t| split(tape.value(t))).collect();
        let prefix = split(tape.value(enc.prefix));
        let l1 = enc.tokens_l1.map(|t| split(tape.value(t)));
        Ok((0..b)
            .map(|i| FeatureCache {
                taps: taps.iter().map(|t| t[i].clone()).collect(),
                prefix: prefix[i].clone(),
                tokens_l1: l1.as_ref().map(|l| l[i].clone()),
            })
            .collect())
    }

    /// Stacks cached features into constants on `tape`.
    pub fn encode_cached<T: Float>(&self, tape: &mut Tape<T>, batch: &[&FeatureCache<T>]) -> Result<Encoded> {
        fn stack<T: Float>(parts: Vec<&Tensor<T>>) -> Result<Tensor<T>> {
            let s = parts[0].shape().to_vec();
            let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
            for p in &parts {
                if p.shape() != s.as_slice() {
                    return Err(PmtError::config(format!("cached feature shape {:?} vs {s:?}", p.shape())));
                }
                data.extend_from_slice(p.data());
            }
            let mut shape = vec![parts.len()];
            shape.extend(s);
            Ok(Tensor::new(&shape, data)?)
        }
        if batch.is_empty() {
            return Err(PmtError::config("empty feature batch"));
        }
        let ntaps = batch[0].taps.len();
        let mut taps = Vec::with_capacity(ntaps);
        for t in 0..ntaps {
            let v = stack(batch.iter().map(|f| &f.taps[t]).collect())?;
            taps.push(tape.constant(v));
        }
        let prefix = tape.constant(stack(batch.iter().map(|f| &f.prefix).collect())?);
        let tokens_l1 = if self.needs_l1() {
            let parts: Option<Vec<&Tensor<T>>> = batch.iter().map(|f| f.tokens_l1.as_ref()).collect();
            let parts = parts.ok_or_else(|| PmtError::config("feature cache lacks baseline tokens"))?;
            Some(tape.constant(stack(parts)?))
        } else {
            None
        };
        Ok(Encoded { taps, prefix, tokens_l1 })
    }

    /// Learned queries broadcast over the batch (`[B, K, D]`).
    pub fn learned_queries<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: usize) -> Var {
        match &self.head {
            Head::Pmd { decoder, .. } => decoder.learned_queries(tape, store, batch),
            Head::Eomt(e) => {
                let q = tape.param(store, e.queries);
                tape.expand_batch(q, batch)
            }
        }
    }

    /// Decodes one frame. `prev_queries` (`[B, K, D]`, the previous frame's
    /// decoded queries) switches on query propagation.
    pub fn decode<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        enc: &Encoded,
        prev_queries: Option<Var>,
        mode: DecodeMode<'_>,
    ) -> Result<DecoderOutput> {
        match &self.head {
            Head::Pmd {
                lateral,
                decoder,
                propagation,
            } => {
                let fused = lateral.forward(tape, store, &enc.taps, &self.encoder.final_ln, mode.is_train())?;
                let b = tape.shape(fused)[0];
                let learned = decoder.learned_queries(tape, store, b);
                let queries = match prev_queries {
                    Some(prev) => propagation.fuse(tape, store, prev, learned)?,
                    None => learned,
                };
                decoder.forward(tape, store, fused, enc.prefix, queries, mode)
            }
            Head::Eomt(e) => {
                if prev_queries.is_some() {
                    return Err(PmtError::config("the injection baseline has no query propagation"));
                }
                let tokens = enc
                    .tokens_l1
                    .ok_or_else(|| PmtError::config("baseline requires the sequence after L1 layers"))?;
                e.forward(tape, store, &self.encoder, tokens, mode)
            }
        }
    }

    /// Number of decoder-side layers producing intermediate predictions.
    pub fn decoder_depth(&self) -> usize {
        match &self.head {
            Head::Pmd { decoder, .. } => decoder.layers.len(),
            Head::Eomt(e) => e.split[1],
        }
    }
}

/// Order-sensitive hash of every encoder parameter's bits.
pub fn encoder_checksum<T: Float>(store: &ParamStore<T>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with(PREFIX)) {
        p.name.hash(&mut h);
        p.value.shape().hash(&mut h);
        for v in p.value.data() {
            v.as_f64().to_bits().hash(&mut h);
        }
    }
    h.finish()
}
