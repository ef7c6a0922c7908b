use std::collections::{BTreeMap, VecDeque};

use proptest::prelude::*;
use refsnake::analysis::{
    density_estimate, psi_statistic, scaling_exponent, Quantile, ScalingRow, ScalingTable,
};
use refsnake::branching::attach_motions;
use refsnake::reflection::{check_label_order, check_noncrossing, check_position_multisets};
use refsnake::tree_coding::{contour_to_forest, forest_to_contour, sample_forest_until};
use refsnake::{
    reflect_system, EdgeLabel, MarkedForest, MeasureAtoms, ObservationGrid, RngStream, TimeGrid,
};

/// Forest built breadth-first: each edge consumes one flag (branch or
/// not) and one lifetime `k / 64`.
fn dyadic_forest(eps: f64, roots: usize, flags: &[bool], ks: &[u32]) -> MarkedForest {
    let mut edges = BTreeMap::new();
    let mut queue: VecDeque<EdgeLabel> = (1..=roots).map(|r| EdgeLabel::root(r).unwrap()).collect();
    let mut i = 0;
    while let Some(l) = queue.pop_front() {
        edges.insert(l.clone(), f64::from(ks[i % ks.len()]) / 64.0);
        if i < flags.len() && flags[i] {
            queue.push_back(l.child(1));
            queue.push_back(l.child(2));
        }
        i += 1;
    }
    MarkedForest::from_lifetime_map(eps, roots, &edges).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dyadic_forests_round_trip(
        roots in 1usize..5,
        flags in prop::collection::vec(any::<bool>(), 0..120),
        ks in prop::collection::vec(1u32..200, 1..50),
    ) {
        let f = dyadic_forest(0.125, roots, &flags, &ks);
        let c = forest_to_contour(&f);
        let g = contour_to_forest(&c).unwrap();
        prop_assert_eq!(g.lifetime_map(), f.lifetime_map());
        let c2 = forest_to_contour(&g);
        prop_assert_eq!(c2.values(), c.values());
        let mut json = Vec::new();
        f.write_json(&mut json).unwrap();
        prop_assert_eq!(MarkedForest::read_json(&json[..]).unwrap(), f);
    }

    #[test]
    fn reflection_invariants(seed in any::<u64>(), eps in prop::sample::select(vec![0.05, 0.1, 0.2])) {
        let mut rng = RngStream::new(seed, 0);
        let x0: Vec<f64> = (0..6).map(|k| 0.1 * k as f64).collect();
        let grid = ObservationGrid::uniform(&TimeGrid::new(0.02, 0.4).unwrap());
        let f = sample_forest_until(eps, x0.len(), grid.horizon(), &mut rng).unwrap();
        let s = attach_motions(&f, &x0, &grid, &mut rng).unwrap();
        let r = reflect_system(&s).unwrap();
        prop_assert_eq!(r.system().len(), s.len());
        prop_assert!(check_position_multisets(&s, &r).is_ok());
        prop_assert!(check_label_order(&r).is_ok());
        prop_assert!(check_noncrossing(&r).is_ok());
    }

    #[test]
    fn psi_monotone_in_z(seed in any::<u64>(), z1 in -1.0f64..2.0, dz in 0.0f64..1.0, d in 0.0f64..0.2) {
        let mut rng = RngStream::new(seed, 1);
        let x0: Vec<f64> = (0..10).map(|k| 0.1 * k as f64).collect();
        let grid = ObservationGrid::uniform(&TimeGrid::new(0.02, 0.5).unwrap());
        let f = sample_forest_until(0.1, x0.len(), grid.horizon(), &mut rng).unwrap();
        let r = reflect_system(&attach_motions(&f, &x0, &grid, &mut rng).unwrap()).unwrap();
        let a = psi_statistic(&r, 0.25, d, z1).unwrap();
        let b = psi_statistic(&r, 0.25, d, z1 + dz).unwrap();
        prop_assert!(a <= b);
    }

    #[test]
    fn density_nonnegative_and_mass_preserving(
        locations in prop::collection::vec(0.3f64..0.7, 1..40),
        h in 0.01f64..0.1,
    ) {
        let weight = 0.02;
        let atoms = MeasureAtoms { t: 0.0, weight, locations };
        let grid: Vec<f64> = (0..4001).map(|k| -0.5 + 2.0 * k as f64 / 4000.0).collect();
        let d = density_estimate(&atoms, h, &grid).unwrap();
        prop_assert!(d.values.iter().all(|&v| v >= 0.0));
        let mass = atoms.total_mass();
        prop_assert!((d.integral() - mass).abs() <= 1e-3 * mass);
    }

    #[test]
    fn exponent_recovered_from_power_law(alpha in 0.2f64..1.5, c in 0.01f64..10.0, rows in 4usize..10) {
        let table = ScalingTable::new(
            (0..rows)
                .map(|k| {
                    let delta = 0.1 * 0.5f64.powi(k as i32);
                    let q = c * delta.powf(alpha);
                    ScalingRow { delta, n: 10, median: q, q90: 2.0 * q, q99: 3.0 * q }
                })
                .collect(),
        )
        .unwrap();
        for q in [Quantile::Median, Quantile::Q90, Quantile::Q99] {
            let fit = scaling_exponent(&table, q).unwrap();
            prop_assert!((fit.slope - alpha).abs() < 1e-9);
        }
    }
}
