//! Frozen-injection baseline: learned queries are concatenated to the patch
//! tokens after the first `L1` encoder layers and processed by the remaining
//! `L2` frozen encoder layers. Only the queries and the mask module train.

use pmt_tensor::{Float, ParamId, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{run_joint_layers, DecodeMode, DecoderOutput, MaskModule};
use crate::encoder::Encoder;
use crate::error::Result;
use crate::nn::{init_tensor, Init};

#[derive(Clone, Debug)]
pub struct EomtBaseline {
    pub queries: ParamId,
    pub head: MaskModule,
    pub split: [usize; 2],
}

impl EomtBaseline {
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        EomtBaseline {
            queries: store.add("eomt.queries", init_tensor(&[cfg.num_queries, d], d, Init::Normal(0.02), rng)),
            head: MaskModule::new(cfg, "eomt.head", store, rng),
            split: cfg.eomt_split,
        }
    }

    /// `tokens: [B, 1 + R + N, D]` = encoder sequence after layer `L1`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        encoder: &Encoder,
        tokens: Var,
        mode: DecodeMode<'_>,
    ) -> Result<DecoderOutput> {
        let b = tape.shape(tokens)[0];
        let q = tape.param(store, self.queries);
        let k = tape.shape(q)[0];
        let q = tape.expand_batch(q, b);
        let x = tape.concat(&[q, tokens], 1)?;
        let rope = encoder.rope::<T>(k)?;
        let [l1, l2] = self.split;
        run_joint_layers(
            tape,
            store,
            &encoder.layers[l1..l1 + l2],
            &encoder.final_ln,
            &self.head,
            x,
            k,
            encoder.prefix_len(),
            Some(&rope),
            mode,
        )
    }
}
