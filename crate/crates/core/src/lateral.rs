//! Lateral fusion of multi-depth encoder features: each tapped depth goes
//! through the encoder's final LayerNorm, a trainable BatchNorm over tokens
//! and a residual two-layer MLP; branch outputs are summed.

use pmt_tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{PmtError, Result};
use crate::nn::{Init, LayerNorm, Linear};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LateralBranch {
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl LateralBranch {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LateralBranch {
            bn_gamma: store.add(format!("{name}.bn.gamma"), Tensor::ones(&[dim])),
            bn_beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[dim])),
            running_mean: store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[dim])),
            running_var: store.add_buffer(format!("{name}.bn.running_var"), Tensor::ones(&[dim])),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim, Init::FanIn, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, Init::Zero, rng),
        }
    }

    /// `x: [B, N, D]` already normalized by the encoder's final LN.
    /// In training mode the running-statistic update is queued on the tape.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, train: bool) -> Result<Var> {
        let g = tape.param(store, self.bn_gamma);
        let b = tape.param(store, self.bn_beta);
        let eps = T::lit(BN_EPS);
        let y = if train {
            let (y, stats) = tape.batch_norm_train(x, g, b, eps)?;
            let m = T::lit(BN_MOMENTUM);
            let keep = T::one() - m;
            let n = stats.count as f64;
            let unbias = T::lit(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
            let mean = Tensor::from_fn(&[stats.mean.len()], |c| {
                keep * store.value(self.running_mean).data()[c] + m * stats.mean[c]
            });
            let var = Tensor::from_fn(&[stats.var.len()], |c| {
                keep * store.value(self.running_var).data()[c] + m * stats.var[c] * unbias
            });
            tape.defer_buffer_update(self.running_mean, mean);
            tape.defer_buffer_update(self.running_var, var);
            y
        } else {
            tape.batch_norm_eval(x, g, b, store.value(self.running_mean), store.value(self.running_var), eps)?
        };
        let h = self.fc1.forward(tape, store, y)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        Ok(tape.add(y, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct Lateral {
    pub branches: Vec<LateralBranch>,
    pub tap_layers: Vec<usize>,
}

impl Lateral {
    pub fn new<T: Float>(tap_layers: &[usize], dim: usize, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        Lateral {
            branches: tap_layers
                .iter()
                .map(|l| LateralBranch::new(store, &format!("lateral.tap{l}"), dim, rng))
                .collect(),
            tap_layers: tap_layers.to_vec(),
        }
    }

    /// Fuses `taps` (one per tap layer, in order) into `[B, N, D]`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        taps: &[Var],
        final_ln: &LayerNorm,
        train: bool,
    ) -> Result<Var> {
        if taps.len() != self.branches.len() {
            return Err(PmtError::config(format!(
                "expected {} tapped features for layers {:?}, got {}",
                self.branches.len(),
                self.tap_layers,
                taps.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (branch, &tap) in self.branches.iter().zip(taps) {
            let x = final_ln.forward(tape, store, tap)?;
            let y = branch.forward(tape, store, x, train)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one branch"))
    }
}
