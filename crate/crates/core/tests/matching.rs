mod common;

use std::collections::{BTreeMap, BTreeSet};

use pmt_core::matching::{hungarian_match, video_match, CostMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_is_optimal_on_rectangular_costs(seed in any::<u64>(), targets in 1usize..=6, extra in 0usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = common::random_cost(&mut rng, targets + extra, targets);
        let m = hungarian_match(&cost).unwrap();
        prop_assert_eq!(m.total_cost(&cost), common::brute_force_assignment(&cost));
    }

    #[test]
    fn assignment_is_an_injection_covering_targets(seed in any::<u64>(), targets in 1usize..=6, extra in 0usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = common::random_cost(&mut rng, targets + extra, targets);
        let m = hungarian_match(&cost).unwrap();
        let queries: BTreeSet<usize> = m.pairs.iter().map(|p| p.0).collect();
        let covered: BTreeSet<usize> = m.pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(queries.len(), m.pairs.len());
        prop_assert_eq!(covered, (0..targets).collect::<BTreeSet<_>>());
    }

    #[test]
    fn video_match_keeps_first_assignment(seed in any::<u64>(), frames in 2usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = vec![3, 4, 5];
        let mut map = BTreeMap::new();
        let mut first: BTreeMap<u32, usize> = BTreeMap::new();
        for _ in 0..frames {
            let cost = common::random_cost(&mut rng, 6, ids.len());
            let m = video_match(&cost, &ids, &mut map).unwrap();
            for &(q, g) in &m.pairs {
                let q0 = *first.entry(ids[g]).or_insert(q);
                prop_assert_eq!(q0, q);
            }
        }
    }
}

#[test]
fn more_targets_than_queries_is_infeasible() {
    let cost = CostMatrix::new(2, 3, vec![0.0; 6]).unwrap();
    assert!(hungarian_match(&cost).is_err());
}
