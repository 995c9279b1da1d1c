//! Parameterized building blocks shared by the encoder and decoders.
//! Blocks hold only [`ParamId`]s; values live in a [`ParamStore`].

use pmt_tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rope::RopeTables;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zero,
    Normal(f64),
}

pub fn init_tensor<T: Float>(shape: &[usize], fan_in: usize, init: Init, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::FanIn => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
        }
        Init::Normal(std) => {
            let n = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape, |_| T::lit(n.sample(rng)))
        }
    }
}

/// `y = x W + b` over the last axis, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_tensor(&[in_dim, out_dim], in_dim, init, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        Ok(tape.layer_norm(x, g, b, T::lit(LN_EPS))?)
    }
}

/// Pre-norm Transformer layer:
/// `x' = x + MHSA(LN(x))`, `y = x' + FFN(LN(x'))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub num_heads: usize,
}

impl TransformerLayer {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        num_heads: usize,
        ffn_expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = dim * ffn_expansion;
        TransformerLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, Init::FanIn, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, Init::FanIn, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, Init::FanIn, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, Init::FanIn, rng),
            num_heads,
        }
    }

    /// `x: [B, T, D]`. `bias` is an additive attention bias `[B, T, T]`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        rope: Option<&RopeTables<T>>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.attention(tape, store, h, rope, bias)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        Ok(tape.add(x, h)?)
    }

    /// Multi-head self-attention on already-normalized input.
    pub fn attention<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        rope: Option<&RopeTables<T>>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let (b, t, d) = match *tape.shape(x) {
            [b, t, d] => (b, t, d),
            ref s => {
                return Err(pmt_tensor::TensorError::invalid("attention", format!("expected [B, T, D], got {s:?}")).into())
            }
        };
        let heads = self.num_heads;
        let dh = d / heads;
        let qkv = self.qkv.forward(tape, store, x)?;
        let qkv = tape.reshape(qkv, &[b, t, 3, heads, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut split = Vec::with_capacity(3);
        for i in 0..3 {
            let part = tape.narrow(qkv, 0, i, 1)?;
            split.push(tape.reshape(part, &[b, heads, t, dh])?);
        }
        let (mut q, mut k, v) = (split[0], split[1], split[2]);
        if let Some(r) = rope {
            q = tape.rope(q, r.cos.clone(), r.sin.clone())?;
            k = tape.rope(k, r.cos.clone(), r.sin.clone())?;
        }
        let q = tape.scale(q, T::one() / T::lit((dh as f64).sqrt()));
        let kt = tape.transpose(k)?;
        let mut scores = tape.matmul(q, kt)?;
        if let Some(bias) = bias {
            scores = tape.add_attention_bias(scores, bias)?;
        }
        let attn = tape.softmax(scores, 3)?;
        let out = tape.matmul(attn, v)?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[b, t, d])?;
        self.proj.forward(tape, store, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_output_weights_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let layer = TransformerLayer::new(&mut store, "l", 8, 2, 2, &mut rng);
        *store.value_mut(layer.proj.weight) = Tensor::zeros(&[8, 8]);
        *store.value_mut(layer.fc2.weight) = Tensor::zeros(&[16, 8]);
        let x = Tensor::from_fn(&[2, 5, 8], |i| (i as f64 * 0.37).sin());
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, &store, xv, None, None).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn two_token_single_head_attention_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let layer = TransformerLayer::new(&mut store, "l", 2, 1, 1, &mut rng);
        // q = k = v = x, output projection identity.
        let mut qkv = Tensor::zeros(&[2, 6]);
        for c in 0..3 {
            qkv.data_mut()[c * 2] = 1.0;
            qkv.data_mut()[6 + c * 2 + 1] = 1.0;
        }
        *store.value_mut(layer.qkv.weight) = qkv;
        *store.value_mut(layer.proj.weight) = Tensor::eye(2);
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.5, 2.0]).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = layer.attention(&mut tape, &store, xv, None, None).unwrap();

        let s = 1.0 / 2f64.sqrt();
        let rows = [[1.0, 0.0], [0.5, 2.0]];
        for i in 0..2 {
            let logits: Vec<f64> = (0..2).map(|j| s * (rows[i][0] * rows[j][0] + rows[i][1] * rows[j][1])).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            for c in 0..2 {
                let expect = w[0] * rows[0][c] + w[1] * rows[1][c];
                assert!((tape.value(y).data()[i * 2 + c] - expect).abs() < 1e-12);
            }
        }
    }
}
