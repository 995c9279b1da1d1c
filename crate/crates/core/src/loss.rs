//! Set-prediction loss: Hungarian-matched cross entropy plus mask BCE and
//! Dice, summed over every deep-supervision prediction set.

use pmt_tensor::{Float, Tape, Tensor, Var};

use crate::config::LossWeights;
use crate::decoder::Prediction;
use crate::error::{PmtError, Result};
use crate::matching::{match_cost, CostMatrix, MatchResult};
use crate::metrics::panoptic::PanopticMap;

/// Ground truth of one image at mask resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub classes: Vec<usize>,
    /// Segment ids from the panoptic map (stable across a clip).
    pub ids: Vec<u32>,
    /// `[G, h * w]` binary masks.
    pub masks: Vec<f64>,
    pub mask_grid: (usize, usize),
}

impl Target {
    /// Downsamples each segment by block majority: a mask cell is on when at
    /// least half of its pixels belong to the segment.
    pub fn from_panoptic(map: &PanopticMap, mask_grid: (usize, usize)) -> Result<Self> {
        let (mh, mw) = mask_grid;
        if mh == 0 || mw == 0 || !map.height.is_multiple_of(mh) || !map.width.is_multiple_of(mw) {
            return Err(PmtError::config(format!(
                "mask grid {mh}x{mw} does not divide {}x{}",
                map.height, map.width
            )));
        }
        let (fy, fx) = (map.height / mh, map.width / mw);
        let half = fy * fx;
        let mut t = Target {
            classes: Vec::new(),
            ids: Vec::new(),
            masks: Vec::new(),
            mask_grid,
        };
        for seg in &map.segments {
            let mut m = vec![0.0; mh * mw];
            for (cy, row) in m.chunks_mut(mw).enumerate() {
                for (cx, cell) in row.iter_mut().enumerate() {
                    let mut count = 0;
                    for y in cy * fy..(cy + 1) * fy {
                        let line = &map.ids[y * map.width + cx * fx..y * map.width + (cx + 1) * fx];
                        count += line.iter().filter(|&&v| v == seg.id).count();
                    }
                    if 2 * count >= half {
                        *cell = 1.0;
                    }
                }
            }
            t.classes.push(seg.class);
            t.ids.push(seg.id);
            t.masks.extend(m);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Per-term values of a loss, summed over prediction sets (unweighted
/// terms; `total` carries the weights).
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.class += o.class;
        self.bce += o.bce;
        self.dice += o.dice;
    }
}

/// Matching cost matrix for image `b` of a prediction set.
pub fn cost_for_image<T: Float>(tape: &Tape<T>, pred: &Prediction, b: usize, target: &Target, weights: &LossWeights) -> Result<CostMatrix> {
    let cl = tape.value(pred.class_logits);
    let ml = tape.value(pred.mask_logits);
    let (k, c1, p) = (cl.shape()[1], cl.shape()[2], ml.shape()[2]);
    let cls: Vec<f64> = cl.data()[b * k * c1..(b + 1) * k * c1].iter().map(|v| v.as_f64()).collect();
    let masks: Vec<f64> = ml.data()[b * k * p..(b + 1) * k * p].iter().map(|v| v.as_f64()).collect();
    match_cost(&cls, c1, &masks, &target.classes, &target.masks, weights)
}

/// Matches every image of `pred` (usually the final set) to its target.
pub fn match_batch<T: Float>(tape: &Tape<T>, pred: &Prediction, targets: &[Target], weights: &LossWeights) -> Result<Vec<MatchResult>> {
    targets
        .iter()
        .enumerate()
        .map(|(b, t)| crate::matching::hungarian_match(&cost_for_image(tape, pred, b, t, weights)?))
        .collect()
}

/// Loss of one prediction set under fixed `matches` (one per image).
pub fn set_loss<T: Float>(
    tape: &mut Tape<T>,
    pred: &Prediction,
    targets: &[Target],
    matches: &[MatchResult],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let cs = tape.shape(pred.class_logits).to_vec();
    let (b, k, c1) = (cs[0], cs[1], cs[2]);
    let p = tape.shape(pred.mask_logits)[2];
    if targets.len() != b || matches.len() != b {
        return Err(PmtError::config(format!(
            "batch of {b} predictions with {} targets and {} matches",
            targets.len(),
            matches.len()
        )));
    }
    let no_object = c1 - 1;
    let mut labels = vec![no_object; b * k];
    let mut row_w = vec![T::lit(weights.no_object_weight); b * k];
    let mut rows = Vec::new();
    let mut mask_targets = Vec::new();
    for (bi, (t, m)) in targets.iter().zip(matches).enumerate() {
        if t.masks.len() != t.len() * p {
            return Err(PmtError::config(format!("target masks do not match {p} mask cells")));
        }
        for &(q, g) in &m.pairs {
            labels[bi * k + q] = t.classes[g];
            row_w[bi * k + q] = T::one();
            rows.push(bi * k + q);
            mask_targets.extend(t.masks[g * p..(g + 1) * p].iter().map(|&v| T::lit(v)));
        }
    }
    let logits = tape.reshape(pred.class_logits, &[b * k, c1])?;
    let ce = tape.cross_entropy(logits, &labels, &row_w)?;
    let mut out = LossBreakdown {
        class: tape.value(ce).item().as_f64(),
        ..Default::default()
    };
    let mut total = tape.scale(ce, T::lit(weights.class_weight));
    if !rows.is_empty() {
        let target = Tensor::new(&[rows.len(), p], mask_targets)?;
        let ml = tape.reshape(pred.mask_logits, &[b * k, p])?;
        let matched = tape.gather_rows(ml, &rows)?;
        let bce = tape.bce_with_logits(matched, &target)?;
        let dice = tape.dice_loss(matched, &target, T::lit(weights.dice_smooth))?;
        out.bce = tape.value(bce).item().as_f64();
        out.dice = tape.value(dice).item().as_f64();
        let bce = tape.scale(bce, T::lit(weights.bce_weight));
        let dice = tape.scale(dice, T::lit(weights.dice_weight));
        total = tape.add(total, bce)?;
        total = tape.add(total, dice)?;
    }
    out.total = tape.value(total).item().as_f64();
    Ok((total, out))
}

/// Sum of [`set_loss`] over `preds` with the same matches for every set.
pub fn segmentation_loss<T: Float>(
    tape: &mut Tape<T>,
    preds: &[Prediction],
    targets: &[Target],
    matches: &[MatchResult],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut acc: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    for pred in preds {
        let (l, b) = set_loss(tape, pred, targets, matches, weights)?;
        breakdown += b;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let total = acc.ok_or_else(|| PmtError::config("no prediction sets"))?;
    breakdown.total = tape.value(total).item().as_f64();
    Ok((total, breakdown))
}
