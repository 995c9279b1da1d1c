//! Central finite-difference gradient verification in 64-bit precision.

use thiserror::Error;

use crate::error::TensorError;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Cap on coordinates checked per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite {side} value at {param}[{index}] (first non-finite op: {op})")]
    NonFinite {
        param: String,
        index: usize,
        side: &'static str,
        op: &'static str,
    },
    #[error("frozen tensor {0} received a gradient")]
    FrozenReceivedGrad(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(store: &ParamStore<f64>, f: &F) -> Result<(f64, Option<&'static str>), TensorError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let mut tape = Tape::inference();
    let out = f(&mut tape, store)?;
    let v = tape.value(out).item();
    let op = tape.first_non_finite().map(|(_, op)| op);
    Ok((v, op))
}

/// Compares tape gradients of the scalar `f` against central differences
/// for every trainable entry of `store`. Frozen entries must receive nothing.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    if let Some((_, op)) = tape.first_non_finite() {
        return Err(GradCheckError::NonFinite {
            param: "<forward>".into(),
            index: 0,
            side: "forward",
            op,
        });
    }
    tape.backward_into(loss, store)?;
    drop(tape);

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for id in ids {
        let (name, trainable, numel) = {
            let p = store.get(id);
            (p.name.clone(), p.requires_grad(), p.value.numel())
        };
        if !trainable {
            if store.get(id).grad().is_some() {
                return Err(GradCheckError::FrozenReceivedGrad(name));
            }
            continue;
        }
        let analytic: Tensor<f64> = store
            .take_grad(id)
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let coords: Vec<usize> = match opts.max_coords {
            Some(cap) if cap < numel => (0..cap).map(|j| j * numel / cap).collect(),
            _ => (0..numel).collect(),
        };
        for idx in coords {
            let a = analytic.data()[idx];
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + opts.step;
            let (plus, op_p) = eval_scalar(store, &f)?;
            store.value_mut(id).data_mut()[idx] = orig - opts.step;
            let (minus, op_m) = eval_scalar(store, &f)?;
            store.value_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(GradCheckError::NonFinite {
                    param: name,
                    index: idx,
                    side: if a.is_finite() { "numeric" } else { "analytic" },
                    op: op_p.or(op_m).unwrap_or("unknown"),
                });
            }
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((name.clone(), idx));
                }
            }
        }
    }
    Ok(report)
}
