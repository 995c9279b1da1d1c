//! 2-D rotary position tables. Feature pairs `(2j, 2j+1)` of each head are
//! split between the two grid axes: the first `ceil(pairs/2)` rotate with the
//! row coordinate, the rest with the column coordinate.

use std::sync::Arc;

use pmt_tensor::Float;

use crate::error::{PmtError, Result};

/// Per-token `cos`/`sin` factors laid out `[tokens, head_dim / 2]`.
#[derive(Clone, Debug)]
pub struct RopeTables<T> {
    pub cos: Arc<[T]>,
    pub sin: Arc<[T]>,
    pub tokens: usize,
    pub pairs: usize,
}

/// Row and column frequency bands for a head of width `head_dim`.
pub fn axis_frequencies(head_dim: usize, base: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !head_dim.is_multiple_of(2) || head_dim == 0 {
        return Err(PmtError::config(format!("rotary positions need an even head dim, got {head_dim}")));
    }
    let pairs = head_dim / 2;
    let n_row = pairs.div_ceil(2);
    let n_col = pairs - n_row;
    let bands = |n: usize| (0..n).map(|j| base.powf(-(j as f64) / n as f64)).collect::<Vec<_>>();
    Ok((bands(n_row), bands(n_col)))
}

/// Grid coordinates of an `h x w` patch grid in row-major order, offset by
/// `shift`.
pub fn grid_positions(h: usize, w: usize, shift: (f64, f64)) -> Vec<Option<(f64, f64)>> {
    (0..h * w)
        .map(|i| Some(((i / w) as f64 + shift.0, (i % w) as f64 + shift.1)))
        .collect()
}

/// `prefix` position-free tokens followed by an `h x w` grid.
pub fn sequence_positions(prefix: usize, h: usize, w: usize, shift: (f64, f64)) -> Vec<Option<(f64, f64)>> {
    let mut pos = vec![None; prefix];
    pos.extend(grid_positions(h, w, shift));
    pos
}

/// Tokens without a coordinate (`None`) get the identity rotation.
pub fn rope_tables<T: Float>(positions: &[Option<(f64, f64)>], head_dim: usize, base: f64) -> Result<RopeTables<T>> {
    let (row, col) = axis_frequencies(head_dim, base)?;
    let pairs = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for p in positions {
        for j in 0..pairs {
            let angle = match p {
                None => 0.0,
                Some((r, _)) if j < row.len() => r * row[j],
                Some((_, c)) => c * col[j - row.len()],
            };
            cos.push(T::lit(angle.cos()));
            sin.push(T::lit(angle.sin()));
        }
    }
    Ok(RopeTables {
        cos: cos.into(),
        sin: sin.into(),
        tokens: positions.len(),
        pairs,
    })
}
