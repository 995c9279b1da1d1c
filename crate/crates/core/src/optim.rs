//! AdamW with decoupled weight decay, and the learning-rate schedules.

use std::collections::BTreeMap;

use pmt_tensor::{Float, ParamId, ParamStore, Tensor};

use crate::config::{ScheduleKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of completed updates.
    pub t: u64,
    /// Only parameters that have received a gradient appear here.
    pub state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update with learning rate `lr` to every trainable entry
    /// holding a gradient, consuming the gradients. Weight decay applies to
    /// matrices only (not to biases, norms or vectors).
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let eps = T::lit(self.eps);
        let lr_t = T::lit(lr);
        let decay = T::one() - T::lit(lr * self.weight_decay);
        let ids: Vec<ParamId> = store.trainable().collect();
        for id in ids {
            let Some(g) = store.take_grad(id) else { continue };
            let mom = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let p = store.value_mut(id);
            if p.ndim() >= 2 && self.weight_decay != 0.0 {
                p.data_mut().iter_mut().for_each(|w| *w *= decay);
            }
            let pd = p.data_mut();
            let md = mom.m.data_mut();
            let vd = mom.v.data_mut();
            for (((w, m), v), &gi) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                *m = b1 * *m + one_b1 * gi;
                *v = b2 * *v + one_b2 * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup over `warmup_steps`, then cosine decay to zero or
/// polynomial decay, over `total` steps.
pub fn learning_rate(base: f64, warmup: usize, total: usize, step: usize, kind: ScheduleKind, power: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    match kind {
        ScheduleKind::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        ScheduleKind::Poly => base * (1.0 - progress).powf(power),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore<f64>, ParamId, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::full(&[2, 2], 1.0));
        let b = s.add("b", Tensor::full(&[2], 1.0));
        let f = s.add("frozen", Tensor::full(&[2, 2], 1.0));
        s.set_requires_grad(f, false);
        (s, w, b, f)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, w, b, f) = store();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&cfg);
        for id in [w, b, f] {
            s.accumulate_grad(id, &Tensor::full(s.value(id).shape(), 1.0));
        }
        opt.step(&mut s, 0.01);
        for v in s.value(w).data().iter().chain(s.value(b).data()) {
            assert!((v - (1.0 - 0.01)).abs() < 1e-8);
        }
        assert!(s.value(f).data().iter().all(|&v| v == 1.0));
        assert!(!opt.state.contains_key(&f));
        assert_eq!(opt.state.len(), 2);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let (mut s, w, _, _) = store();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&cfg);
        s.accumulate_grad(w, &Tensor::zeros(&[2, 2]));
        opt.step(&mut s, 0.1);
        assert!(s.value(w).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn decay_skips_vectors() {
        let (mut s, w, b, _) = store();
        let mut opt = AdamW::new(&TrainConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        s.accumulate_grad(w, &Tensor::zeros(&[2, 2]));
        s.accumulate_grad(b, &Tensor::zeros(&[2]));
        opt.step(&mut s, 0.1);
        assert!(s.value(w).data().iter().all(|&v| (v - 0.95).abs() < 1e-15));
        assert!(s.value(b).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn schedules() {
        let lr = |s, k| learning_rate(1.0, 10, 110, s, k, 0.9);
        assert!((lr(0, ScheduleKind::Cosine) - 0.1).abs() < 1e-12);
        assert_eq!(lr(9, ScheduleKind::Cosine), 1.0);
        assert_eq!(lr(10, ScheduleKind::Cosine), 1.0);
        assert!((lr(60, ScheduleKind::Cosine) - 0.5).abs() < 1e-12);
        assert!(lr(110, ScheduleKind::Cosine).abs() < 1e-12);
        assert!((lr(60, ScheduleKind::Poly) - 0.5f64.powf(0.9)).abs() < 1e-12);
        assert_eq!(lr(110, ScheduleKind::Poly), 0.0);
    }
}
