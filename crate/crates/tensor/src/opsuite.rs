//! Finite-difference cases covering every differentiable tape op. Each case
//! builds random parameters and a scalar function of them; [`run_case`]
//! checks a number of independently seeded instances.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::gradcheck::{grad_check, GradCheckError, GradCheckOptions};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type ScalarFn = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, TensorError>>;

pub struct OpCase {
    pub name: &'static str,
    /// Ops exercised by the case.
    pub ops: &'static [&'static str],
    pub build: fn(&mut ChaCha8Rng, &mut ParamStore<f64>) -> ScalarFn,
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: u64,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts `y` with a fixed random tensor so no coordinate has a trivially
/// zero gradient.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let r = randn(&mut rng, tape.shape(y));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Runs `instances` seeds of `case`; the report carries the worst error.
pub fn run_case(case: &OpCase, instances: u64, opts: &GradCheckOptions) -> Result<CaseReport, GradCheckError> {
    let mut out = CaseReport {
        name: case.name,
        instances,
        max_rel_err: 0.0,
        coords_checked: 0,
    };
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = (case.build)(&mut rng, &mut store);
        let r = grad_check(&mut store, |t, s| f(t, s), opts)?;
        out.max_rel_err = out.max_rel_err.max(r.max_rel_err);
        out.coords_checked += r.coords_checked;
    }
    Ok(out)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            ops: &["matmul"],
            build: |rng, store| {
                let a = store.add("a", randn(rng, &[2, 3, 4]));
                let b = store.add("b", randn(rng, &[4, 5]));
                let c = store.add("c", randn(rng, &[2, 5, 3]));
                Box::new(move |t, s| {
                    let (va, vb, vc) = (t.param(s, a), t.param(s, b), t.param(s, c));
                    let ab = t.matmul(va, vb)?;
                    let abc = t.matmul(ab, vc)?;
                    project(t, abc, 1)
                })
            },
        },
        OpCase {
            name: "matmul_shared_lhs",
            ops: &["matmul"],
            build: |rng, store| {
                let a = store.add("a", randn(rng, &[3, 4]));
                let b = store.add("b", randn(rng, &[2, 4, 2]));
                Box::new(move |t, s| {
                    let (va, vb) = (t.param(s, a), t.param(s, b));
                    let y = t.matmul(va, vb)?;
                    project(t, y, 2)
                })
            },
        },
        OpCase {
            name: "elementwise",
            ops: &["add", "sub", "mul", "scale"],
            build: |rng, store| {
                let a = store.add("a", randn(rng, &[3, 2, 4]));
                let b = store.add("b", randn(rng, &[4]));
                let c = store.add("c", randn(rng, &[2, 4]));
                Box::new(move |t, s| {
                    let (va, vb, vc) = (t.param(s, a), t.param(s, b), t.param(s, c));
                    let x = t.add(va, vb)?;
                    let x = t.mul(x, vc)?;
                    let x = t.sub(vc, x)?;
                    let x = t.scale(x, 0.7);
                    project(t, x, 3)
                })
            },
        },
        OpCase {
            name: "softmax",
            ops: &["softmax"],
            build: |rng, store| {
                let a = store.add("a", randn(rng, &[2, 3, 4]).map(|v| 3.0 * v));
                Box::new(move |t, s| {
                    let va = t.param(s, a);
                    let y0 = t.softmax(va, 1)?;
                    let y1 = t.softmax(va, 2)?;
                    let y = t.add(y0, y1)?;
                    project(t, y, 4)
                })
            },
        },
        OpCase {
            name: "masked_softmax",
            ops: &["add_attention_bias", "softmax"],
            build: |rng, store| {
                let a = store.add("a", randn(rng, &[2, 2, 3, 4]));
                let mut bias = Tensor::zeros(&[2, 3, 4]);
                for (i, v) in bias.data_mut().iter_mut().enumerate() {
                    if i % 5 == 1 {
                        *v = f64::NEG_INFINITY;
                    }
                }
                Box::new(move |t, s| {
                    let va = t.param(s, a);
                    let y = t.add_attention_bias(va, &bias)?;
                    let y = t.softmax_last(y)?;
                    project(t, y, 5)
                })
            },
        },
        OpCase {
            name: "layer_norm",
            ops: &["layer_norm"],
            build: |rng, store| {
                let x = store.add("x", randn(rng, &[3, 6]));
                let g = store.add("gamma", randn(rng, &[6]));
                let b = store.add("beta", randn(rng, &[6]));
                Box::new(move |t, s| {
                    let (vx, vg, vb) = (t.param(s, x), t.param(s, g), t.param(s, b));
                    let y = t.layer_norm(vx, vg, vb, 1e-6)?;
                    project(t, y, 6)
                })
            },
        },
        OpCase {
            name: "batch_norm",
            ops: &["batch_norm_train", "batch_norm_eval"],
            build: |rng, store| {
                let x = store.add("x", randn(rng, &[2, 5, 4]));
                let g = store.add("gamma", randn(rng, &[4]));
                let b = store.add("beta", randn(rng, &[4]));
                let mean = randn(rng, &[4]);
                let var = randn(rng, &[4]).map(|v| v.abs() + 0.5);
                Box::new(move |t, s| {
                    let (vx, vg, vb) = (t.param(s, x), t.param(s, g), t.param(s, b));
                    let (y0, _) = t.batch_norm_train(vx, vg, vb, 1e-5)?;
                    let y1 = t.batch_norm_eval(vx, vg, vb, &mean, &var, 1e-5)?;
                    let y = t.add(y0, y1)?;
                    project(t, y, 7)
                })
            },
        },
        OpCase {
            name: "activations",
            ops: &["gelu", "sigmoid"],
            build: |rng, store| {
                let x = store.add("x", randn(rng, &[4, 5]).map(|v| 3.0 * v));
                Box::new(move |t, s| {
                    let vx = t.param(s, x);
                    let g = t.gelu(vx);
                    let sg = t.sigmoid(vx);
                    let y = t.mul(g, sg)?;
                    project(t, y, 8)
                })
            },
        },
        OpCase {
            name: "resampling",
            ops: &["upsample2x", "resize_bilinear"],
            build: |rng, store| {
                let x = store.add("x", randn(rng, &[2, 3, 3, 2]));
                Box::new(move |t, s| {
                    let vx = t.param(s, x);
                    let up = t.upsample2x(vx, 1)?;
                    let r = t.resize_bilinear(up, 1, 5, 7)?;
                    project(t, r, 9)
                })
            },
        },
        OpCase {
            name: "rope",
            ops: &["rope"],
            build: |rng, store| {
                let x = store.add("x", randn(rng, &[2, 3, 4]));
                let angles: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let cos: Arc<[f64]> = angles.iter().map(|a| a.cos()).collect();
                let sin: Arc<[f64]> = angles.iter().map(|a| a.sin()).collect();
                Box::new(move |t, s| {
                    let vx = t.param(s, x);
                    let y = t.rope(vx, cos.clone(), sin.clone())?;
                    project(t, y, 10)
                })
            },
        },
        OpCase {
            name: "layout",
            ops: &["expand_batch", "concat", "permute", "reshape", "gather_rows", "narrow", "transpose"],
            build: |rng, store| {
                let a = store.add("a", randn(rng, &[2, 3, 4]));
                let b = store.add("b", randn(rng, &[2, 2, 4]));
                let q = store.add("q", randn(rng, &[2, 4]));
                Box::new(move |t, s| {
                    let (va, vb, vq) = (t.param(s, a), t.param(s, b), t.param(s, q));
                    let qe = t.expand_batch(vq, 2);
                    let c = t.concat(&[va, vb, qe], 1)?;
                    let p = t.permute(c, &[2, 0, 1])?;
                    let p = t.reshape(p, &[8, 7])?;
                    let g = t.gather_rows(p, &[3, 0, 3, 7])?;
                    let n = t.narrow(g, 1, 2, 4)?;
                    let tr = t.transpose(n)?;
                    project(t, tr, 11)
                })
            },
        },
        OpCase {
            name: "reductions",
            ops: &["sum", "mean"],
            build: |rng, store| {
                let x = store.add("x", randn(rng, &[3, 3]));
                Box::new(move |t, s| {
                    let vx = t.param(s, x);
                    let sq = t.mul(vx, vx)?;
                    let m = t.mean(sq);
                    let total = t.sum(vx);
                    let total = t.mul(total, total)?;
                    t.add(m, total)
                })
            },
        },
        OpCase {
            name: "losses",
            ops: &["cross_entropy", "bce_with_logits", "dice_loss"],
            build: |rng, store| {
                let logits = store.add("logits", randn(rng, &[4, 5]).map(|v| 2.0 * v));
                let masks = store.add("masks", randn(rng, &[3, 6]).map(|v| 2.0 * v));
                let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
                let weights: Vec<f64> = (0..4).map(|i| if i % 2 == 0 { 1.0 } else { 0.1 }).collect();
                let mask_t = Tensor::from_fn(&[3, 6], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
                Box::new(move |t, s| {
                    let (vl, vm) = (t.param(s, logits), t.param(s, masks));
                    let ce = t.cross_entropy(vl, &targets, &weights)?;
                    let bce = t.bce_with_logits(vm, &mask_t)?;
                    let dice = t.dice_loss(vm, &mask_t, 1.0)?;
                    let x = t.add(ce, bce)?;
                    let x = t.scale(x, 2.0);
                    t.add(x, dice)
                })
            },
        },
    ]
}
