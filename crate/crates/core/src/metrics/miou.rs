//! Dataset-level mean IoU from an accumulated confusion matrix.

use serde::Serialize;

use crate::error::{PmtError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionAccumulator {
    pub num_classes: usize,
    /// `matrix[gt * C + pred]`.
    pub matrix: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouResult {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        ConfusionAccumulator {
            num_classes,
            matrix: vec![0; num_classes * num_classes],
        }
    }

    /// `gt` entries of `None` are ignored pixels.
    pub fn add(&mut self, pred: &[usize], gt: &[Option<usize>]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(PmtError::config(format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len())));
        }
        let c = self.num_classes;
        for (&p, g) in pred.iter().zip(gt) {
            let Some(g) = *g else { continue };
            if p >= c || g >= c {
                return Err(PmtError::config(format!("class {} outside {c} classes", p.max(g))));
            }
            self.matrix[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
    }

    /// Mean over classes with a nonzero union; `None` if there are none.
    pub fn result(&self) -> Option<MiouResult> {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.matrix[k * c + k];
                let gt: u64 = self.matrix[k * c..(k + 1) * c].iter().sum();
                let pred: u64 = (0..c).map(|g| self.matrix[g * c + k]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return None;
        }
        Some(MiouResult {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}
