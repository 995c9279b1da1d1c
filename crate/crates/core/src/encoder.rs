//! Plain ViT encoder with rotary patch positions, a class token and register
//! tokens.

use pmt_tensor::{Float, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{PmtError, Result};
use crate::nn::{init_tensor, Init, LayerNorm, Linear, TransformerLayer};
use crate::rope::{rope_tables, sequence_positions, RopeTables};

pub const PREFIX: &str = "encoder.";

#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub cls: pmt_tensor::ParamId,
    pub registers: Option<pmt_tensor::ParamId>,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub num_registers: usize,
    pub head_dim: usize,
    pub rope_base: f64,
}

/// Raw patch-token features at each requested depth plus the normalized
/// final sequence.
pub struct EncoderOutput {
    /// `[B, N, D]` per tap, class/register tokens stripped.
    pub taps: Vec<Var>,
    /// `LN(X^L)` over the whole sequence `[B, 1 + R + N, D]`.
    pub final_normed: Var,
}

/// `[B, 3, H, W] -> [B, N, 3 p^2]`, patches in row-major grid order, each
/// patch flattened channel-major.
pub fn patchify<T: Float>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = images.shape() else {
        return Err(PmtError::config(format!("images must be [B, 3, H, W], got {:?}", images.shape())));
    };
    let (b, c, h, w) = (*b, *c, *h, *w);
    if h % p != 0 || w % p != 0 {
        return Err(PmtError::config(format!("image {h}x{w} not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    let src = images.data();
    let mut out = vec![T::zero(); b * gh * gw * feat];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let o = ((bi * gh + gy) * gw + gx) * feat;
                for ci in 0..c {
                    for dy in 0..p {
                        let s = ((bi * c + ci) * h + gy * p + dy) * w + gx * p;
                        let d = o + (ci * p + dy) * p;
                        out[d..d + p].copy_from_slice(&src[s..s + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[b, gh * gw, feat], out)?)
}

impl Encoder {
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let patch_embed = Linear::new(store, "encoder.patch_embed", 3 * p * p, d, Init::FanIn, rng);
        let cls = store.add("encoder.cls", init_tensor(&[1, d], d, Init::Normal(0.02), rng));
        let registers = (cfg.num_register_tokens > 0).then(|| {
            store.add(
                "encoder.registers",
                init_tensor(&[cfg.num_register_tokens, d], d, Init::Normal(0.02), rng),
            )
        });
        let layers = (0..cfg.num_layers)
            .map(|i| TransformerLayer::new(store, &format!("encoder.layers.{i}"), d, cfg.num_heads, cfg.ffn_expansion, rng))
            .collect();
        let final_ln = LayerNorm::new(store, "encoder.final_ln", d);
        Encoder {
            patch_embed,
            cls,
            registers,
            layers,
            final_ln,
            patch_size: p,
            grid: cfg.grid(),
            num_registers: cfg.num_register_tokens,
            head_dim: cfg.head_dim(),
            rope_base: cfg.rope_base,
        }
    }

    /// Class plus register tokens.
    pub fn prefix_len(&self) -> usize {
        1 + self.num_registers
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Rotary tables for a sequence of `extra` position-free tokens, then the
    /// class/register tokens, then the patch grid.
    pub fn rope<T: Float>(&self, extra: usize) -> Result<RopeTables<T>> {
        let pos = sequence_positions(extra + self.prefix_len(), self.grid.0, self.grid.1, (0.0, 0.0));
        rope_tables(&pos, self.head_dim, self.rope_base)
    }

    /// Patch embedding plus prepended class/register tokens: `[B, 1 + R + N, D]`.
    pub fn embed<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Var> {
        let (gh, gw) = self.grid;
        let p = self.patch_size;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != gh * p || s[3] != gw * p {
            return Err(PmtError::config(format!(
                "expected images [B, 3, {}, {}], got {s:?}",
                gh * p,
                gw * p
            )));
        }
        let b = s[0];
        let patches = tape.constant(patchify(images, p)?);
        let tokens = self.patch_embed.forward(tape, store, patches)?;
        let cls = tape.param(store, self.cls);
        let mut prefix = vec![cls];
        if let Some(r) = self.registers {
            prefix.push(tape.param(store, r));
        }
        let prefix = tape.concat(&prefix, 0)?;
        let prefix = tape.expand_batch(prefix, b);
        Ok(tape.concat(&[prefix, tokens], 1)?)
    }

    /// Runs layers `range` (0-based) over `x`.
    pub fn run_layers<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        range: std::ops::Range<usize>,
        rope: &RopeTables<T>,
    ) -> Result<Var> {
        for layer in &self.layers[range] {
            x = layer.forward(tape, store, x, Some(rope), None)?;
        }
        Ok(x)
    }

    /// Full forward, returning the raw patch tokens after each 1-based layer
    /// in `taps`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        taps: &[usize],
    ) -> Result<EncoderOutput> {
        let rope = self.rope(0)?;
        let mut x = self.embed(tape, store, images)?;
        let n = self.num_patches();
        let pre = self.prefix_len();
        let mut out = Vec::with_capacity(taps.len());
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x, Some(&rope), None)?;
            if taps.contains(&(i + 1)) {
                out.push(tape.narrow(x, 1, pre, n)?);
            }
        }
        if out.len() != taps.len() {
            return Err(PmtError::config(format!("tap layers {taps:?} exceed encoder depth {}", self.layers.len())));
        }
        let final_normed = self.final_ln.forward(tape, store, x)?;
        Ok(EncoderOutput { taps: out, final_normed })
    }
}

/// Linear probe used only for the encoder's classification pretext.
#[derive(Clone, Debug)]
pub struct PretextHead {
    pub linear: Linear,
}

impl PretextHead {
    pub fn new<T: Float>(store: &mut ParamStore<T>, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        PretextHead {
            linear: Linear::new(store, "pretext.head", dim, classes, Init::FanIn, rng),
        }
    }

    /// Logits `[B, classes]` from the normalized class token.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, out: &EncoderOutput) -> Result<Var> {
        let b = tape.shape(out.final_normed)[0];
        let d = tape.shape(out.final_normed)[2];
        let cls = tape.narrow(out.final_normed, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[b, d])?;
        self.linear.forward(tape, store, cls)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmt_tensor::kernels::matmul;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_height: 32,
            image_width: 32,
            patch_size: 16,
            embed_dim: 8,
            num_layers: 4,
            num_heads: 2,
            tap_layers: vec![1, 2, 3, 4],
            eomt_split: [2, 2],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn patch_count_and_zero_image() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(enc.num_patches(), 4);
        let mut tape = Tape::inference();
        let x = enc.embed(&mut tape, &store, &Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        let v = tape.value(x);
        assert_eq!(v.shape(), &[1, 1 + 2 + 4, 8]);
        assert!(v.data()[3 * 8..].iter().all(|&t| t == 0.0));
    }

    #[test]
    fn single_patch_projection_is_flatten_then_matmul() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let img = Tensor::from_fn(&[1, 3, 32, 32], |i| (i as f64 * 0.01).sin());
        let mut tape = Tape::inference();
        let x = enc.embed(&mut tape, &store, &img).unwrap();
        // Patch (row 1, col 0): gather its pixels by hand.
        let mut flat = Vec::new();
        for c in 0..3 {
            for y in 16..32 {
                for xx in 0..16 {
                    flat.push(img.data()[(c * 32 + y) * 32 + xx]);
                }
            }
        }
        let row = Tensor::new(&[1, 768], flat).unwrap();
        let expect = matmul(&row, store.value(enc.patch_embed.weight)).unwrap();
        let got = &tape.value(x).data()[(3 + 2) * 8..(3 + 3) * 8];
        for (a, b) in got.iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_image_size_is_config_error() {
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::inference();
        assert!(matches!(enc.embed(&mut tape, &store, &Tensor::zeros(&[1, 3, 16, 32])), Err(PmtError::Config(_))));
    }

    #[test]
    fn taps_have_patch_shape() {
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::inference();
        let out = enc.forward(&mut tape, &store, &Tensor::ones(&[2, 3, 32, 32]), &[1, 2, 3, 4]).unwrap();
        assert_eq!(out.taps.len(), 4);
        for t in &out.taps {
            assert_eq!(tape.shape(*t), &[2, 4, 8]);
        }
        let only_last = enc.forward(&mut tape, &store, &Tensor::ones(&[2, 3, 32, 32]), &[4]).unwrap();
        assert_eq!(tape.value(only_last.taps[0]), tape.value(out.taps[3]));
    }
}
