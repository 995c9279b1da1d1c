//! Query propagation between video frames:
//! `Q^F_t = Linear(Q_{t-1}) + Q^lrn`, bypassed at the first frame.

use pmt_tensor::{Float, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{PmtError, Result};
use crate::nn::{Init, Linear};

#[derive(Clone, Debug)]
pub struct QueryPropagation {
    pub proj: Linear,
}

impl QueryPropagation {
    /// The projection starts at zero, so an untrained video model behaves
    /// like the image model on every frame.
    pub fn new<T: Float>(dim: usize, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        QueryPropagation {
            proj: Linear::new(store, "temporal.proj", dim, dim, Init::Zero, rng),
        }
    }

    /// `prev: [B, K, D]` decoded queries of the previous frame,
    /// `learned: [B, K, D]`.
    pub fn fuse<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, prev: Var, learned: Var) -> Result<Var> {
        if tape.shape(prev) != tape.shape(learned) {
            return Err(PmtError::config(format!(
                "previous queries {:?} do not match learned queries {:?}",
                tape.shape(prev),
                tape.shape(learned)
            )));
        }
        let p = self.proj.forward(tape, store, prev)?;
        Ok(tape.add(p, learned)?)
    }
}

/// Inference-time state carried between frames. Track ids are positional:
/// query slot `i` always carries track `i`.
#[derive(Clone, Debug)]
pub struct TrackState<T> {
    pub prev_queries: Option<Tensor<T>>,
    pub track_ids: Vec<usize>,
    pub frame_index: usize,
}

impl<T: Float> TrackState<T> {
    pub fn new(num_queries: usize) -> Self {
        TrackState {
            prev_queries: None,
            track_ids: (0..num_queries).collect(),
            frame_index: 0,
        }
    }

    pub fn advance(&mut self, decoded: Tensor<T>) {
        self.prev_queries = Some(decoded);
        self.frame_index += 1;
    }
}
