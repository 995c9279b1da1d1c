//! Video panoptic quality: PQ over spatio-temporal tubes. For window `k`,
//! every run of `k + 1` consecutive frames is stacked into one map (ids are
//! tube ids) and scored with the image PQ rules; VPQ averages over windows.

use serde::Serialize;

use super::panoptic::PanopticMap;
use super::pq::PqAccumulator;
use crate::error::{PmtError, Result};

pub const DEFAULT_WINDOWS: [usize; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct VpqAccumulator {
    pub windows: Vec<(usize, PqAccumulator)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VpqResult {
    pub vpq: f64,
    /// `(k, PQ over k-windows)`; `None` when no clip was long enough.
    pub per_window: Vec<(usize, Option<f64>)>,
}

impl VpqAccumulator {
    pub fn new(num_classes: usize, windows: &[usize]) -> Self {
        VpqAccumulator {
            windows: windows.iter().map(|&k| (k, PqAccumulator::new(num_classes))).collect(),
        }
    }

    /// Adds one clip; windows longer than the clip are skipped.
    pub fn add_clip(&mut self, pred: &[PanopticMap], gt: &[PanopticMap]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(PmtError::config(format!("{} predicted vs {} ground-truth frames", pred.len(), gt.len())));
        }
        for (k, acc) in &mut self.windows {
            let len = *k + 1;
            if len > gt.len() {
                continue;
            }
            for s in 0..=gt.len() - len {
                let p: Vec<&PanopticMap> = pred[s..s + len].iter().collect();
                let g: Vec<&PanopticMap> = gt[s..s + len].iter().collect();
                acc.add(&PanopticMap::concat_vertical(&p), &PanopticMap::concat_vertical(&g))?;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &VpqAccumulator) {
        for ((_, a), (_, b)) in self.windows.iter_mut().zip(&other.windows) {
            a.merge(b);
        }
    }

    pub fn result(&self) -> Option<VpqResult> {
        let per_window: Vec<(usize, Option<f64>)> = self.windows.iter().map(|(k, a)| (*k, a.result().map(|r| r.pq))).collect();
        let vals: Vec<f64> = per_window.iter().filter_map(|(_, v)| *v).collect();
        if vals.is_empty() {
            return None;
        }
        Some(VpqResult {
            vpq: vals.iter().sum::<f64>() / vals.len() as f64,
            per_window,
        })
    }
}
