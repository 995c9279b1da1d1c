//! Forward and backward kernels on raw tensors. The tape wraps these; code that
//! never needs gradients (inference, metrics, caches) may call them directly.

use crate::error::{Result, TensorError};
use crate::scalar::Float;
use crate::tensor::{numel, Tensor};

// ---------------------------------------------------------------- matmul

#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(TensorError::shape("matmul", a, b));
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(TensorError::shape("matmul", a, b));
    }
    let (batch_shape, a_batched, b_batched) = if ab == bb {
        (ab, !ab.is_empty(), !bb.is_empty())
    } else if bb.is_empty() {
        (ab, true, false)
    } else if ab.is_empty() {
        (bb, false, true)
    } else {
        return Err(TensorError::shape("matmul", a, b));
    };
    let mut out = batch_shape.to_vec();
    out.extend_from_slice(&[am[0], bm[1]]);
    Ok((
        MatmulDims {
            batch: numel(batch_shape),
            a_batched,
            b_batched,
            m: am[0],
            k: am[1],
            n: bm[1],
        },
        out,
    ))
}

/// Batched matrix product `a[.., m, k] · b[.., k, n]`. Leading batch dims must
/// agree, or one operand may be a plain matrix shared across the batch.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, out_shape) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); numel(&out_shape)];
    let (m, k, n) = (d.m, d.k, d.n);
    let (ad, bd) = (a.data(), b.data());
    if !d.b_batched {
        let rows = if d.a_batched { d.batch * m } else { m };
        T::gemm(rows, k, n, T::one(), ad, (k as isize, 1), bd, (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
    } else {
        for i in 0..d.batch {
            let a_off = if d.a_batched { i * m * k } else { 0 };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[a_off..a_off + m * k],
                (k as isize, 1),
                &bd[i * k * n..(i + 1) * k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
    }
    Tensor::new(&out_shape, out)
}

/// Returns (d_a, d_b) for `out = a·b` given `g = d out`. Either side may be skipped.
pub(crate) fn matmul_backward<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (d, _) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (d.m, d.k, d.n);
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let (ki, ni) = (k as isize, n as isize);
    let mut da = need_a.then(|| vec![T::zero(); a.numel()]);
    let mut db = need_b.then(|| vec![T::zero(); b.numel()]);
    if !d.b_batched {
        let rows = if d.a_batched { d.batch * m } else { m };
        if let Some(da) = da.as_mut() {
            // da = g · bᵀ
            T::gemm(rows, n, k, T::one(), gd, (ni, 1), bd, (1, ni), T::zero(), da, (ki, 1));
        }
        if let Some(db) = db.as_mut() {
            // db = aᵀ · g
            T::gemm(k, rows, n, T::one(), ad, (1, ki), gd, (ni, 1), T::zero(), db, (ni, 1));
        }
    } else {
        for i in 0..d.batch {
            let a_off = if d.a_batched { i * m * k } else { 0 };
            let gs = &gd[i * m * n..(i + 1) * m * n];
            let bs = &bd[i * k * n..(i + 1) * k * n];
            if let Some(da) = da.as_mut() {
                // Shared `a` accumulates across the batch.
                let beta = if d.a_batched { T::zero() } else { T::one() };
                T::gemm(m, n, k, T::one(), gs, (ni, 1), bs, (1, ni), beta, &mut da[a_off..a_off + m * k], (ki, 1));
            }
            if let Some(db) = db.as_mut() {
                let as_ = &ad[a_off..a_off + m * k];
                T::gemm(k, m, n, T::one(), as_, (1, ki), gs, (ni, 1), T::zero(), &mut db[i * k * n..(i + 1) * k * n], (ni, 1));
            }
        }
    }
    (
        da.map(|v| Tensor::new(a.shape(), v).unwrap()),
        db.map(|v| Tensor::new(b.shape(), v).unwrap()),
    )
}

// ------------------------------------------------------------ broadcasting

/// Output shape for an elementwise op where one operand's shape is a trailing
/// suffix of the other's (leading-batch broadcast only).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() >= b.len() && a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(TensorError::shape(op, a, b))
    }
}

pub(crate) fn zip_broadcast<T: Float>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let (la, lb) = (ad.len(), bd.len());
    let data = (0..numel(&shape)).map(|i| f(ad[i % la], bd[i % lb])).collect();
    Tensor::new(&shape, data)
}

/// Sums a broadcast gradient back down to `shape` (a trailing suffix of `g`).
pub(crate) fn reduce_to<T: Float>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let len = numel(shape);
    let mut out = vec![T::zero(); len];
    for chunk in g.data().chunks(len) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    Tensor::new(shape, out).unwrap()
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

pub fn sub<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_broadcast("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_broadcast("mul", a, b, |x, y| x * y)
}

// ----------------------------------------------------------------- softmax

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(TensorError::Axis {
            op: "softmax",
            axis,
            shape: x.shape().to_vec(),
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(out[idx(j)]);
            }
            if max == T::neg_infinity() {
                // Fully masked row: no mass anywhere.
                for j in 0..len {
                    out[idx(j)] = T::zero();
                }
                continue;
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (out[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_backward<T: Float>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                let p = base + j * inner;
                dot += yd[p] * gd[p];
            }
            for j in 0..len {
                let p = base + j * inner;
                dx[p] = yd[p] * (gd[p] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx).unwrap()
}

// ------------------------------------------------------------ normalization

/// Per-row statistics saved by layer norm for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct RowStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, RowStats<T>)> {
    let d = *x.shape().last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / d.max(1);
    let dn = T::lit(d as f64);
    let mut out = vec![T::zero(); x.numel()];
    let mut stats = RowStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for (r, row) in x.data().chunks(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rstd = T::one() / (var + eps).sqrt();
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            o[j] = (row[j] - mean) * rstd * gamma.data()[j] + beta.data()[j];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(x.shape(), out)?, stats))
}

pub(crate) fn layer_norm_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &RowStats<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let dn = T::lit(d as f64);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, (row, grow)) in x.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = grow[j] * gamma.data()[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
            dgamma[j] += grow[j] * xhat[j];
            dbeta[j] += grow[j];
        }
        let o = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            o[j] = rstd * (dxhat[j] - sum_dxhat / dn - xhat[j] * sum_dxhat_xhat / dn);
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(&[d], dgamma).unwrap(),
        Tensor::new(&[d], dbeta).unwrap(),
    )
}

/// Per-channel statistics of a batch-norm step.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance, used for normalization.
    pub var: Vec<T>,
    /// Number of rows the statistics were computed over.
    pub count: usize,
}

/// Batch norm over every leading row of `x[.., C]`, with either the batch's
/// own statistics or supplied (running) ones.
pub(crate) fn batch_norm_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&Tensor<T>, &Tensor<T>)>,
    eps: T,
) -> Result<(Tensor<T>, BatchStats<T>, Vec<T>)> {
    let c = *x.shape().last().ok_or_else(|| TensorError::invalid("batch_norm", "scalar input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::shape("batch_norm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / c.max(1);
    let (mean, var) = match running {
        Some((rm, rv)) => {
            if rm.shape() != [c] || rv.shape() != [c] {
                return Err(TensorError::shape("batch_norm", x.shape(), rm.shape()));
            }
            (rm.data().to_vec(), rv.data().to_vec())
        }
        None => {
            if rows == 0 {
                return Err(TensorError::invalid("batch_norm", "empty batch"));
            }
            let n = T::lit(rows as f64);
            let mut mean = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for j in 0..c {
                    mean[j] += row[j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for j in 0..c {
                    let dv = row[j] - mean[j];
                    var[j] += dv * dv;
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        }
    };
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); x.numel()];
    for (r, row) in x.data().chunks(c).enumerate() {
        let o = &mut out[r * c..(r + 1) * c];
        for j in 0..c {
            o[j] = (row[j] - mean[j]) * rstd[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, BatchStats { mean, var, count: rows }, rstd))
}

pub(crate) fn batch_norm_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
    rstd: &[T],
    batch_stats: bool,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let n = T::lit(stats.count as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut sum_dxhat = vec![T::zero(); c];
    let mut sum_dxhat_xhat = vec![T::zero(); c];
    for (row, grow) in x.data().chunks(c).zip(g.data().chunks(c)) {
        for j in 0..c {
            let xhat = (row[j] - stats.mean[j]) * rstd[j];
            let dxhat = grow[j] * gamma.data()[j];
            dgamma[j] += grow[j] * xhat;
            dbeta[j] += grow[j];
            sum_dxhat[j] += dxhat;
            sum_dxhat_xhat[j] += dxhat * xhat;
        }
    }
    let mut dx = vec![T::zero(); x.numel()];
    for (r, (row, grow)) in x.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
        let o = &mut dx[r * c..(r + 1) * c];
        for j in 0..c {
            let dxhat = grow[j] * gamma.data()[j];
            o[j] = if batch_stats {
                let xhat = (row[j] - stats.mean[j]) * rstd[j];
                rstd[j] * (dxhat - sum_dxhat[j] / n - xhat * sum_dxhat_xhat[j] / n)
            } else {
                dxhat * rstd[j]
            };
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(&[c], dgamma).unwrap(),
        Tensor::new(&[c], dbeta).unwrap(),
    )
}

// ---------------------------------------------------------- activations

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub(crate) fn gelu_backward<T: Float>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
            gv * d
        })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

pub fn sigmoid_scalar<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

// ---------------------------------------------------------- resampling

/// Source index pair and weight for one output coordinate, half-pixel
/// (align-corners = false) convention, clamped at the borders.
fn resample_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Layout of a resampled tensor: `[outer.., h, w, inner..]` with the spatial
/// pair starting at `h_axis`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ResampleDims {
    outer: usize,
    h: usize,
    w: usize,
    inner: usize,
    oh: usize,
    ow: usize,
}

pub(crate) fn resample_dims(shape: &[usize], h_axis: usize, oh: usize, ow: usize) -> Result<(ResampleDims, Vec<usize>)> {
    if h_axis + 1 >= shape.len() {
        return Err(TensorError::Axis {
            op: "resize_bilinear",
            axis: h_axis,
            shape: shape.to_vec(),
        });
    }
    let (h, w) = (shape[h_axis], shape[h_axis + 1]);
    if h == 0 || w == 0 {
        return Err(TensorError::invalid("resize_bilinear", "empty spatial extent"));
    }
    let mut out = shape.to_vec();
    out[h_axis] = oh;
    out[h_axis + 1] = ow;
    Ok((
        ResampleDims {
            outer: numel(&shape[..h_axis]),
            h,
            w,
            inner: numel(&shape[h_axis + 2..]),
            oh,
            ow,
        },
        out,
    ))
}

/// Bilinear resize of the spatial pair at `h_axis`, `h_axis + 1`.
pub fn resize_bilinear<T: Float>(x: &Tensor<T>, h_axis: usize, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (d, out_shape) = resample_dims(x.shape(), h_axis, oh, ow)?;
    let ty = resample_taps(d.h, d.oh);
    let tx = resample_taps(d.w, d.ow);
    let xd = x.data();
    let mut out = vec![T::zero(); numel(&out_shape)];
    let inner = d.inner;
    for o in 0..d.outer {
        let src = &xd[o * d.h * d.w * inner..(o + 1) * d.h * d.w * inner];
        let dst = &mut out[o * d.oh * d.ow * inner..(o + 1) * d.oh * d.ow * inner];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let (p00, p01) = ((y0 * d.w + x0) * inner, (y0 * d.w + x1) * inner);
                let (p10, p11) = ((y1 * d.w + x0) * inner, (y1 * d.w + x1) * inner);
                let q = (oy * d.ow + ox) * inner;
                // Nested lerps reproduce constant inputs exactly.
                for i in 0..inner {
                    let top = src[p00 + i] + lx * (src[p01 + i] - src[p00 + i]);
                    let bottom = src[p10 + i] + lx * (src[p11 + i] - src[p10 + i]);
                    dst[q + i] = top + ly * (bottom - top);
                }
            }
        }
    }
    Tensor::new(&out_shape, out)
}

pub(crate) fn resize_bilinear_backward<T: Float>(in_shape: &[usize], h_axis: usize, g: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (g.shape()[h_axis], g.shape()[h_axis + 1]);
    let (d, _) = resample_dims(in_shape, h_axis, oh, ow).expect("validated in forward");
    let ty = resample_taps(d.h, d.oh);
    let tx = resample_taps(d.w, d.ow);
    let gd = g.data();
    let mut dx = vec![T::zero(); numel(in_shape)];
    let inner = d.inner;
    for o in 0..d.outer {
        let src = &gd[o * d.oh * d.ow * inner..(o + 1) * d.oh * d.ow * inner];
        let dst = &mut dx[o * d.h * d.w * inner..(o + 1) * d.h * d.w * inner];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::lit(ly), T::lit(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::lit(lx), T::lit(1.0 - lx));
                let q = (oy * d.ow + ox) * inner;
                for i in 0..inner {
                    let gv = src[q + i];
                    dst[(y0 * d.w + x0) * inner + i] += hy * hx * gv;
                    dst[(y0 * d.w + x1) * inner + i] += hy * lx * gv;
                    dst[(y1 * d.w + x0) * inner + i] += ly * hx * gv;
                    dst[(y1 * d.w + x1) * inner + i] += ly * lx * gv;
                }
            }
        }
    }
    Tensor::new(in_shape, dx).unwrap()
}

/// 2× bilinear upsampling of the last two axes, e.g. `[C, h, w] -> [C, 2h, 2w]`.
pub fn bilinear_upsample2x<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() < 2 {
        return Err(TensorError::invalid("bilinear_upsample2x", "needs at least 2 axes"));
    }
    let h_axis = x.ndim() - 2;
    resize_bilinear(x, h_axis, 2 * x.shape()[h_axis], 2 * x.shape()[h_axis + 1])
}

// ----------------------------------------------------------- rotary

/// Rotates consecutive feature pairs of `x[.., T, d]` by per-token angles
/// given as `cos`/`sin` tables of shape `[T, d/2]`.
pub fn rope_apply<T: Float>(x: &Tensor<T>, cos: &[T], sin: &[T], inverse: bool) -> Result<Tensor<T>> {
    if x.ndim() < 2 {
        return Err(TensorError::invalid("rope", "needs at least 2 axes"));
    }
    let d = x.shape()[x.ndim() - 1];
    let t = x.shape()[x.ndim() - 2];
    if !d.is_multiple_of(2) {
        return Err(TensorError::invalid("rope", format!("odd feature width {d}")));
    }
    let half = d / 2;
    if cos.len() != t * half || sin.len() != t * half {
        return Err(TensorError::invalid(
            "rope",
            format!("table of {} entries does not cover {t} tokens x {half} pairs", cos.len()),
        ));
    }
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(d).enumerate() {
        let tok = r % t;
        for p in 0..half {
            let (c, s) = (cos[tok * half + p], sin[tok * half + p]);
            let s = if inverse { -s } else { s };
            let (a, b) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = a * c - b * s;
            row[2 * p + 1] = a * s + b * c;
        }
    }
    Tensor::new(x.shape(), out)
}

// --------------------------------------------------------- layout

pub fn permute<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::invalid("permute", format!("{perm:?} is not a permutation of {nd} axes")));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.numel();
    let mut out = Vec::with_capacity(total);
    if total > 0 {
        let src = x.data();
        let last = nd - 1;
        let (inner_len, inner_stride) = (out_shape[last], strides[last]);
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        loop {
            for j in 0..inner_len {
                out.push(src[off + j * inner_stride]);
            }
            // Advance the outer multi-index.
            let mut ax = last;
            loop {
                if ax == 0 {
                    return Tensor::new(&out_shape, out);
                }
                ax -= 1;
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat<T: Float>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(TensorError::Axis {
            op: "concat",
            axis,
            shape: first.shape().to_vec(),
        });
    }
    for p in parts {
        let ok = p.ndim() == first.ndim()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::shape("concat", first.shape(), p.shape()));
        }
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(&shape, out)
}

pub fn narrow<T: Float>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(TensorError::Axis {
            op: "narrow",
            axis,
            shape: x.shape().to_vec(),
        });
    }
    if start + len > x.shape()[axis] {
        return Err(TensorError::invalid(
            "narrow",
            format!("range {start}..{} exceeds extent {} of {:?}", start + len, x.shape()[axis], x.shape()),
        ));
    }
    let (outer, full, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(&shape, out)
}

pub fn gather_rows<T: Float>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if x.ndim() == 0 {
        return Err(TensorError::invalid("gather_rows", "scalar input"));
    }
    let rows = x.shape()[0];
    let row_len = x.numel() / rows.max(1);
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    let mut out = Vec::with_capacity(idx.len() * row_len);
    for &i in idx {
        if i >= rows {
            return Err(TensorError::invalid("gather_rows", format!("row {i} out of {rows}")));
        }
        out.extend_from_slice(&x.data()[i * row_len..(i + 1) * row_len]);
    }
    Tensor::new(&shape, out)
}

// --------------------------------------------------------------- losses

/// Weighted-mean softmax cross entropy over rows of `logits[M, C]`.
/// Returns the loss and the row-wise softmax.
pub(crate) fn cross_entropy_forward<T: Float>(
    logits: &Tensor<T>,
    targets: &[usize],
    weights: &[T],
) -> Result<(T, Tensor<T>)> {
    if logits.ndim() != 2 || logits.shape()[0] != targets.len() || weights.len() != targets.len() {
        return Err(TensorError::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let c = logits.shape()[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(TensorError::invalid("cross_entropy", format!("target {t} out of {c} classes")));
    }
    let probs = softmax(logits, 1)?;
    let total_w: T = weights.iter().copied().sum();
    if total_w <= T::zero() {
        return Err(TensorError::invalid("cross_entropy", "weights sum to zero"));
    }
    let mut loss = T::zero();
    for (r, row) in logits.data().chunks(c).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += weights[r] * (lse - row[targets[r]]);
    }
    Ok((loss / total_w, probs))
}

/// Mean binary cross entropy on logits against fixed targets.
pub(crate) fn bce_forward<T: Float>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    if logits.shape() != targets.shape() {
        return Err(TensorError::shape("bce_with_logits", logits.shape(), targets.shape()));
    }
    if logits.numel() == 0 {
        return Err(TensorError::invalid("bce_with_logits", "empty input"));
    }
    let total: T = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
        .sum();
    Ok(total / T::lit(logits.numel() as f64))
}

/// Mean Dice loss over rows of `logits[M, P]` (sigmoid applied), with
/// additive smoothing in numerator and denominator.
pub(crate) fn dice_forward<T: Float>(logits: &Tensor<T>, targets: &Tensor<T>, smooth: T) -> Result<T> {
    if logits.shape() != targets.shape() || logits.ndim() != 2 {
        return Err(TensorError::shape("dice", logits.shape(), targets.shape()));
    }
    let (m, p) = (logits.shape()[0], logits.shape()[1]);
    if m == 0 {
        return Err(TensorError::invalid("dice", "no rows"));
    }
    let mut total = T::zero();
    for r in 0..m {
        let (num, den) = dice_terms(&logits.data()[r * p..(r + 1) * p], &targets.data()[r * p..(r + 1) * p], smooth);
        total += T::one() - num / den;
    }
    Ok(total / T::lit(m as f64))
}

fn dice_terms<T: Float>(x: &[T], t: &[T], smooth: T) -> (T, T) {
    let mut inter = T::zero();
    let mut sum_p = T::zero();
    let mut sum_t = T::zero();
    for (&xv, &tv) in x.iter().zip(t) {
        let s = sigmoid_scalar(xv);
        inter += s * tv;
        sum_p += s;
        sum_t += tv;
    }
    (T::lit(2.0) * inter + smooth, sum_p + sum_t + smooth)
}

pub(crate) fn dice_backward<T: Float>(logits: &Tensor<T>, targets: &Tensor<T>, smooth: T, g: T) -> Tensor<T> {
    let (m, p) = (logits.shape()[0], logits.shape()[1]);
    let scale = g / T::lit(m as f64);
    let two = T::lit(2.0);
    let mut dx = vec![T::zero(); logits.numel()];
    for r in 0..m {
        let x = &logits.data()[r * p..(r + 1) * p];
        let t = &targets.data()[r * p..(r + 1) * p];
        let (num, den) = dice_terms(x, t, smooth);
        for j in 0..p {
            let s = sigmoid_scalar(x[j]);
            // d(1 - num/den)/ds = -(2t·den - num)/den²
            let ds = -(two * t[j] * den - num) / (den * den);
            dx[r * p + j] = scale * ds * s * (T::one() - s);
        }
    }
    Tensor::new(logits.shape(), dx).unwrap()
}
