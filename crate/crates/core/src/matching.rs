//! Bipartite matching between predicted queries and ground-truth segments.

use std::collections::BTreeMap;

use crate::config::LossWeights;
use crate::error::{PmtError, Result};

/// Dense `queries x targets` cost matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub queries: usize,
    pub targets: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(queries: usize, targets: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != queries * targets {
            return Err(PmtError::config(format!(
                "cost matrix {queries}x{targets} needs {} entries, got {}",
                queries * targets,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(PmtError::config(format!("non-finite matching cost {v}")));
        }
        Ok(CostMatrix { queries, targets, data })
    }

    pub fn from_fn(queries: usize, targets: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(queries * targets);
        for q in 0..queries {
            for g in 0..targets {
                data.push(f(q, g));
            }
        }
        Self::new(queries, targets, data)
    }

    pub fn get(&self, query: usize, target: usize) -> f64 {
        self.data[query * self.targets + target]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(query, target)` pairs ordered by target index.
    pub pairs: Vec<(usize, usize)>,
    pub num_queries: usize,
}

impl MatchResult {
    /// Sum of `cost[q, g]` over pairs, accumulated in target order.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.get(q, g)).sum()
    }

    /// Target index per query, `None` for no-object queries.
    pub fn target_of_query(&self) -> Vec<Option<usize>> {
        let mut v = vec![None; self.num_queries];
        for &(q, g) in &self.pairs {
            v[q] = Some(g);
        }
        v
    }
}

/// Minimum-cost assignment of every target to a distinct query
/// (shortest augmenting paths with dual potentials, `O(G^2 Q)`).
pub fn hungarian_match(cost: &CostMatrix) -> Result<MatchResult> {
    let (n, m) = (cost.targets, cost.queries);
    if n > m {
        return Err(PmtError::Infeasible(format!("{n} targets but only {m} queries")));
    }
    // 1-based arrays; row i = target, column j = query, column 0 is virtual.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(j - 1, i0 - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    Ok(MatchResult { pairs, num_queries: m })
}

/// Matching cost between one image's queries and its targets:
/// `w_cls * (-p[class]) + w_bce * BCE + w_dice * Dice`.
///
/// `class_logits: [K, C + 1]`, `mask_logits: [K, P]`, `target_masks:
/// [G, P]` with values in {0, 1}.
pub fn match_cost(
    class_logits: &[f64],
    num_logits: usize,
    mask_logits: &[f64],
    target_classes: &[usize],
    target_masks: &[f64],
    weights: &LossWeights,
) -> Result<CostMatrix> {
    let k = class_logits.len() / num_logits;
    let g = target_classes.len();
    if k == 0 || !mask_logits.len().is_multiple_of(k) {
        return Err(PmtError::config("mask logits do not match the query count"));
    }
    let p = mask_logits.len() / k;
    if target_masks.len() != g * p {
        return Err(PmtError::config(format!(
            "target masks hold {} values, expected {g} x {p}",
            target_masks.len()
        )));
    }
    let probs: Vec<Vec<f64>> = class_logits
        .chunks(num_logits)
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(k * g);
    for (qi, q) in mask_logits.chunks(p).enumerate() {
        let sig: Vec<f64> = q.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let sig_sum: f64 = sig.iter().sum();
        for (gi, t) in target_masks.chunks(p).enumerate() {
            let mut bce = 0.0;
            let mut inter = 0.0;
            let mut tsum = 0.0;
            for ((&x, &y), &s) in q.iter().zip(t).zip(&sig) {
                bce += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
                inter += s * y;
                tsum += y;
            }
            let bce = bce / p as f64;
            let dice = 1.0 - (2.0 * inter + weights.dice_smooth) / (sig_sum + tsum + weights.dice_smooth);
            let cls = -probs[qi][target_classes[gi]];
            data.push(weights.class_weight * cls + weights.bce_weight * bce + weights.dice_weight * dice);
        }
    }
    CostMatrix::new(k, g, data)
}

/// Clip-level matching: an object keeps the query it was matched to in the
/// first frame it appeared; new objects are matched among queries never
/// assigned in this clip. `persistent` maps object id to query and is
/// updated in place.
pub fn video_match(cost: &CostMatrix, target_ids: &[u32], persistent: &mut BTreeMap<u32, usize>) -> Result<MatchResult> {
    if target_ids.len() != cost.targets {
        return Err(PmtError::config("one id per target required"));
    }
    let taken: std::collections::BTreeSet<usize> = persistent.values().copied().collect();
    let free: Vec<usize> = (0..cost.queries).filter(|q| !taken.contains(q)).collect();
    let fresh: Vec<usize> = (0..cost.targets).filter(|&g| !persistent.contains_key(&target_ids[g])).collect();
    let mut pairs: Vec<(usize, usize)> = (0..cost.targets)
        .filter_map(|g| persistent.get(&target_ids[g]).map(|&q| (q, g)))
        .collect();
    if !fresh.is_empty() {
        if fresh.len() > free.len() {
            return Err(PmtError::Infeasible(format!(
                "{} new objects but only {} unassigned queries",
                fresh.len(),
                free.len()
            )));
        }
        let sub = CostMatrix::from_fn(free.len(), fresh.len(), |q, g| cost.get(free[q], fresh[g]))?;
        for (q, g) in hungarian_match(&sub)?.pairs {
            persistent.insert(target_ids[fresh[g]], free[q]);
            pairs.push((free[q], fresh[g]));
        }
    }
    pairs.sort_by_key(|&(_, g)| g);
    Ok(MatchResult {
        pairs,
        num_queries: cost.queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_hand_case() {
        let c = CostMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let m = hungarian_match(&c).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost(&c), 1.0);
    }

    #[test]
    fn identity_favoring_cost() {
        let c = CostMatrix::from_fn(5, 5, |q, g| if q == g { 0.0 } else { 1.0 + (q * g) as f64 }).unwrap();
        let m = hungarian_match(&c).unwrap();
        assert_eq!(m.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn more_targets_than_queries_is_infeasible() {
        let c = CostMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(hungarian_match(&c), Err(PmtError::Infeasible(_))));
    }

    #[test]
    fn zero_targets_is_empty_match() {
        let c = CostMatrix::new(3, 0, vec![]).unwrap();
        assert!(hungarian_match(&c).unwrap().pairs.is_empty());
    }

    #[test]
    fn equal_costs_prefer_low_query_index() {
        let c = CostMatrix::new(3, 1, vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(hungarian_match(&c).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn one_by_one_cost_by_hand() {
        // logits [0, 0] -> p = 0.5; mask logit 0 -> sigmoid 0.5, target 1.
        let w = LossWeights::default();
        let c = match_cost(&[0.0, 0.0], 2, &[0.0], &[0], &[1.0], &w).unwrap();
        let bce = std::f64::consts::LN_2;
        let dice = 1.0 - (2.0 * 0.5 + 1.0) / (0.5 + 1.0 + 1.0);
        let expect = w.class_weight * -0.5 + w.bce_weight * bce + w.dice_weight * dice;
        assert!((c.get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn perfect_query_is_row_minimum() {
        let w = LossWeights::default();
        // Query 0 predicts class 1 with mask [1, 0]; query 1 is vague.
        let class = [-5.0, 5.0, -5.0, 0.0, 0.0, 0.0];
        let masks = [20.0, -20.0, 0.0, 0.0];
        let c = match_cost(&class, 3, &masks, &[1], &[1.0, 0.0], &w).unwrap();
        assert!(c.get(0, 0) < c.get(1, 0));
    }

    #[test]
    fn persistence_and_reserved_queries() {
        let mut map = BTreeMap::new();
        // Frame 0: objects 10, 11. Costs favor queries 0 and 1.
        let c0 = CostMatrix::from_fn(3, 2, |q, g| if q == g { 0.0 } else { 1.0 }).unwrap();
        let m0 = video_match(&c0, &[10, 11], &mut map).unwrap();
        assert_eq!(m0, hungarian_match(&c0).unwrap());
        // Frame 1: object 10 only; costs now favor query 2, pair must persist.
        let c1 = CostMatrix::from_fn(3, 1, |q, _| if q == 2 { 0.0 } else { 5.0 }).unwrap();
        assert_eq!(video_match(&c1, &[10], &mut map).unwrap().pairs, vec![(0, 0)]);
        // Frame 2: new object 12 prefers query 1 (object 11's) but must take 2.
        let c2 = CostMatrix::from_fn(3, 2, |q, g| if g == 1 && q == 1 { 0.0 } else { 3.0 }).unwrap();
        let m2 = video_match(&c2, &[10, 12], &mut map).unwrap();
        assert_eq!(m2.pairs, vec![(0, 0), (2, 1)]);
        // No query left for a fourth object.
        let c3 = CostMatrix::from_fn(3, 1, |_, _| 0.0).unwrap();
        assert!(matches!(video_match(&c3, &[13], &mut map), Err(PmtError::Infeasible(_))));
    }
}
