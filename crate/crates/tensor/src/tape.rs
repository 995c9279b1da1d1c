//! Linear reverse-mode tape.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in exact reverse
//! order of execution. Nodes that no gradient can reach are stored as plain
//! constants, so an inference tape (`Tape::inference`) saves nothing.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, BatchStats, RowStats};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Constant,
    Input,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddAttnBias(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: RowStats<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    Gelu(Var),
    Sigmoid(Var),
    Resize {
        x: Var,
        h_axis: usize,
    },
    Rope {
        x: Var,
        cos: Arc<[T]>,
        sin: Arc<[T]>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    ExpandBatch(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Tensor<T>,
    },
    Bce {
        logits: Var,
        targets: Tensor<T>,
    },
    Dice {
        logits: Var,
        targets: Tensor<T>,
        smooth: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddAttnBias(..) => "add_attention_bias",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Resize { .. } => "resize_bilinear",
            Op::Rope { .. } => "rope",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows(..) => "gather_rows",
            Op::ExpandBatch(..) => "expand_batch",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Bce { .. } => "bce_with_logits",
            Op::Dice { .. } => "dice",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    bound: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Op name of the earliest node holding a non-finite value, if any.
    /// First node holding NaN or +inf. Negative infinity is allowed since
    /// masked attention logits carry it by construction.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.data().iter().any(|v| v.is_nan() || (v.is_infinite() && *v > T::zero())))
            .map(|(i, n)| (i, n.op.name()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// A differentiable leaf (when the tape records gradients).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a store entry to this tape. Repeated calls return the same node.
    /// Frozen entries and buffers enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = if p.requires_grad() {
            self.input(p.value.clone())
        } else {
            self.constant(p.value.clone())
        };
        self.bound.insert(id, v);
        v
    }

    /// Queues a new value for a buffer (e.g. running statistics); applied by
    /// the caller once the step completes.
    pub fn defer_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    // ------------------------------------------------------------ ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum; one operand may broadcast over the other's leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Adds a constant attention bias `[B, Tq, Tk]` (or `[Tq, Tk]`) to
    /// scores `[B, H, Tq, Tk]`, broadcast over heads.
    pub fn add_attention_bias(&mut self, scores: Var, bias: &Tensor<T>) -> Result<Var> {
        let s = self.value(scores);
        let ss = s.shape();
        let bs = bias.shape();
        let ok = ss.len() == 4
            && ((bs.len() == 3 && bs[0] == ss[0] && bs[1..] == ss[2..]) || (bs.len() == 2 && bs[..] == ss[2..]));
        if !ok {
            return Err(TensorError::shape("add_attention_bias", ss, bs));
        }
        let (b, h, block) = (ss[0], ss[1], ss[2] * ss[3]);
        let per_batch = bs.len() == 3;
        let mut out = s.data().to_vec();
        for bi in 0..b {
            let bias_off = if per_batch { bi * block } else { 0 };
            let brow = &bias.data()[bias_off..bias_off + block];
            for hi in 0..h {
                let o = &mut out[(bi * h + hi) * block..(bi * h + hi + 1) * block];
                for (v, &c) in o.iter_mut().zip(brow) {
                    *v += c;
                }
            }
        }
        let out = Tensor::new(ss, out)?;
        Ok(self.push(out, Op::AddAttnBias(scores), &[scores]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).ndim().checked_sub(1).ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        self.softmax(x, axis)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, stats) = kernels::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    /// Batch norm over every leading row of `x[.., C]` using batch statistics.
    /// Returns the statistics so the caller can update running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (out, stats, rstd) = kernels::batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), None, eps)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            stats: stats.clone(),
            rstd,
            batch_stats: true,
        };
        Ok((self.push(out, op, &[x, gamma, beta]), stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &Tensor<T>, var: &Tensor<T>, eps: T) -> Result<Var> {
        let (out, stats, rstd) =
            kernels::batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), Some((mean, var)), eps)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            stats,
            rstd,
            batch_stats: false,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Bilinear resize of the spatial axes `h_axis`, `h_axis + 1`.
    pub fn resize_bilinear(&mut self, x: Var, h_axis: usize, oh: usize, ow: usize) -> Result<Var> {
        let out = kernels::resize_bilinear(self.value(x), h_axis, oh, ow)?;
        Ok(self.push(out, Op::Resize { x, h_axis }, &[x]))
    }

    /// 2× bilinear upsampling with the spatial pair at `h_axis`, `h_axis + 1`.
    pub fn upsample2x(&mut self, x: Var, h_axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if h_axis + 1 >= s.len() {
            return Err(TensorError::Axis {
                op: "upsample2x",
                axis: h_axis,
                shape: s.to_vec(),
            });
        }
        let (oh, ow) = (2 * s[h_axis], 2 * s[h_axis + 1]);
        self.resize_bilinear(x, h_axis, oh, ow)
    }

    /// Rotates feature pairs of `x[.., T, d]` by the `[T, d/2]` angle tables.
    pub fn rope(&mut self, x: Var, cos: Arc<[T]>, sin: Arc<[T]>) -> Result<Var> {
        let out = kernels::rope_apply(self.value(x), &cos, &sin, false)?;
        Ok(self.push(out, Op::Rope { x, cos, sin }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(x), perm)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(TensorError::invalid("transpose", "needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = kernels::gather_rows(self.value(x), idx)?;
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Repeats `x` along a new leading axis of extent `n`.
    pub fn expand_batch(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let mut data = Vec::with_capacity(n * v.numel());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&shape, data).unwrap();
        self.push(out, Op::ExpandBatch(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Weighted-mean cross entropy of `logits[M, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits), targets, weights)?;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean binary cross entropy between `logits` and fixed targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let loss = kernels::bce_forward(self.value(logits), targets)?;
        let op = Op::Bce {
            logits,
            targets: targets.clone(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean over rows of `1 - (2|P∩G| + s) / (|P| + |G| + s)` with `P = sigmoid(logits)`.
    pub fn dice_loss(&mut self, logits: Var, targets: &Tensor<T>, smooth: T) -> Result<Var> {
        let loss = kernels::dice_forward(self.value(logits), targets, smooth)?;
        let op = Op::Dice {
            logits,
            targets: targets.clone(),
            smooth,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    // ------------------------------------------------------- backward

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            // Only leaves keep their gradient; intermediates are released.
            if matches!(self.nodes[i].op, Op::Input) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    /// Runs backward from `loss` and accumulates gradients of every bound
    /// trainable entry into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        let mut bound: Vec<(ParamId, Var)> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        bound.sort();
        for (id, v) in bound {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads[v.0] = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Input => {}
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(self.value(*a), self.value(*b), g, self.needs(*a), self.needs(*b));
                if let Some(da) = da {
                    self.acc(grads, *a, da);
                }
                if let Some(db) = db {
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, kernels::reduce_to(g, self.shape(*a)));
                self.acc(grads, *b, kernels::reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, kernels::reduce_to(g, self.shape(*a)));
                let neg = g.map(|v| -v);
                self.acc(grads, *b, kernels::reduce_to(&neg, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = kernels::mul(g, bv).expect("forward-checked");
                    self.acc(grads, *a, kernels::reduce_to(&ga, av.shape()));
                }
                if self.needs(*b) {
                    let gb = kernels::mul(g, av).expect("forward-checked");
                    self.acc(grads, *b, kernels::reduce_to(&gb, bv.shape()));
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * *s)),
            Op::AddAttnBias(x) => self.acc(grads, *x, g.clone()),
            Op::Softmax(x, axis) => self.acc(grads, *x, kernels::softmax_backward(&node.value, g, *axis)),
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (dx, dg, db) = kernels::layer_norm_backward(self.value(*x), self.value(*gamma), stats, g);
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                rstd,
                batch_stats,
            } => {
                let (dx, dg, db) = kernels::batch_norm_backward(self.value(*x), self.value(*gamma), stats, rstd, *batch_stats, g);
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::Gelu(x) => self.acc(grads, *x, kernels::gelu_backward(self.value(*x), g)),
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                self.acc(grads, *x, Tensor::new(y.shape(), data).unwrap());
            }
            Op::Resize { x, h_axis } => {
                self.acc(grads, *x, kernels::resize_bilinear_backward(self.shape(*x), *h_axis, g));
            }
            Op::Rope { x, cos, sin } => {
                self.acc(grads, *x, kernels::rope_apply(g, cos, sin, true).expect("forward-checked"));
            }
            Op::Reshape(x) => self.acc(grads, *x, g.clone().reshape(self.shape(*x)).unwrap()),
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_permutation(perm);
                self.acc(grads, *x, kernels::permute(g, &inv).unwrap());
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        self.acc(grads, p, kernels::narrow(g, *axis, start, len).unwrap());
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.needs(*x) {
                    let in_shape = self.shape(*x);
                    let (outer, full, inner) = kernels::axis_split(in_shape, *axis);
                    let len = g.shape()[*axis];
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    self.acc(grads, *x, Tensor::new(in_shape, dx).unwrap());
                }
            }
            Op::GatherRows(x, idx) => {
                if self.needs(*x) {
                    let in_shape = self.shape(*x);
                    let row = self.value(*x).numel() / in_shape[0].max(1);
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..row {
                            dx[r * row + j] += g.data()[k * row + j];
                        }
                    }
                    self.acc(grads, *x, Tensor::new(in_shape, dx).unwrap());
                }
            }
            Op::ExpandBatch(x) => self.acc(grads, *x, kernels::reduce_to(g, self.shape(*x))),
            Op::Sum(x) => {
                let s = g.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = probs.shape()[1];
                let total_w: T = weights.iter().copied().sum();
                let scale = g.item() / total_w;
                let mut dx = probs.data().to_vec();
                for (r, row) in dx.chunks_mut(c).enumerate() {
                    row[targets[r]] -= T::one();
                    for v in row.iter_mut() {
                        *v *= weights[r] * scale;
                    }
                }
                self.acc(grads, *logits, Tensor::new(probs.shape(), dx).unwrap());
            }
            Op::Bce { logits, targets } => {
                let x = self.value(*logits);
                let scale = g.item() / T::lit(x.numel() as f64);
                let data = x
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&v, &t)| (kernels::sigmoid_scalar(v) - t) * scale)
                    .collect();
                self.acc(grads, *logits, Tensor::new(x.shape(), data).unwrap());
            }
            Op::Dice { logits, targets, smooth } => {
                let dx = kernels::dice_backward(self.value(*logits), targets, *smooth, g.item());
                self.acc(grads, *logits, dx);
            }
        }
    }
}
