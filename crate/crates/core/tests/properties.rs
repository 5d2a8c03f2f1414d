use approx::assert_abs_diff_eq;
use flowlens_core::attribution::{shapley_exact, shapley_sampled, trajectory_shap, FnValue, Grouping, RegionAttribution, SplitMode, TargetSpec};
use flowlens_core::attribution::{AttributionResult, Estimator, FeatureSpace};
use flowlens_core::flow::{build_flow, transitions, CellTrajectoryIndex, Channel, FlowTensor};
use flowlens_core::ingest::{Cell, GridSpec, Sample, SnappedTrajectory};
use flowlens_core::regions::{voronoi, Bbox};
use proptest::prelude::*;

fn grid() -> GridSpec {
    GridSpec::new([0.0, 0.0, 6.0, 5.0], 5, 6, 100.0, 0.0).unwrap()
}

fn trajectory() -> impl Strategy<Value = Vec<(usize, usize, u16)>> {
    proptest::collection::vec((0usize..5, 0usize..6, 1u16..150), 1..25)
}

fn to_snapped(id: usize, steps: &[(usize, usize, u16)]) -> SnappedTrajectory {
    let mut t = 0.0;
    let samples = steps
        .iter()
        .map(|&(row, col, dt)| {
            t += dt as f64;
            Sample {
                slice: (t / 100.0).floor() as i64,
                cell: Cell::new(row, col),
                timestamp: t,
            }
        })
        .collect();
    SnappedTrajectory {
        trajectory_id: format!("v{id:03}"),
        grid: grid(),
        samples,
        dropped: 0,
    }
}

fn mask(c: &[bool]) -> usize {
    c.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| 1 << i).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_is_sum_of_trajectory_tensors(trajs in proptest::collection::vec(trajectory(), 1..30), k in 0i64..20) {
        let snapped: Vec<_> = trajs.iter().enumerate().map(|(i, s)| to_snapped(i, s)).collect();
        let (tensor, index) = build_flow(&grid(), &snapped, k).unwrap();
        let mut summed = FlowTensor::zeros(k, 5, 6);
        for t in &snapped {
            for (key, n) in transitions(t, k).entries {
                summed.add(key.channel, key.cell, n);
            }
        }
        prop_assert_eq!(&summed.counts, &tensor.counts);
        prop_assert_eq!(tensor.total(Channel::In), tensor.total(Channel::Out));
        for (key, list) in &index.entries {
            prop_assert_eq!(list.iter().map(|(_, n)| n).sum::<u32>(), tensor.get(key.channel, key.cell));
        }
        let back = FlowTensor::from_le_bytes(k, 5, 6, &tensor.to_le_bytes()).unwrap();
        prop_assert_eq!(back, tensor);
    }

    #[test]
    fn exact_values_are_efficient(p in 1usize..9, table in proptest::collection::vec(-10.0f64..10.0, 256)) {
        let game = FnValue::new(p, |c: &[bool]| table[mask(c)]);
        let r = shapley_exact(&game).unwrap();
        prop_assert!(r.efficiency_residual().abs() <= 1e-9);
        prop_assert_eq!(r.base_value, table[0]);
        prop_assert_eq!(r.full_value, table[(1 << p) - 1]);
    }

    #[test]
    fn sampled_values_are_efficient_and_seeded(p in 13usize..18, w in proptest::collection::vec(-5.0f64..5.0, 18), seed in 0u64..1000) {
        let game = FnValue::new(p, |c: &[bool]| {
            let on: Vec<f64> = (0..p).filter(|&i| c[i]).map(|i| w[i]).collect();
            on.iter().sum::<f64>() + on.len() as f64 * on.iter().cloned().fold(0.0, f64::max)
        });
        let a = shapley_sampled(&game, 2048, seed).unwrap();
        prop_assert!(a.efficiency_residual().abs() <= 1e-9);
        prop_assert_eq!(a.clone(), shapley_sampled(&game, 2048, seed).unwrap());
    }

    #[test]
    fn trajectory_scores_conserve_attribution(
        trajs in proptest::collection::vec(trajectory(), 1..20),
        phis in proptest::collection::vec(-1.0f64..1.0, 60),
        proportional in any::<bool>(),
    ) {
        let g = grid();
        let snapped: Vec<_> = trajs.iter().enumerate().map(|(i, s)| to_snapped(i, s)).collect();
        let index: CellTrajectoryIndex = build_flow(&g, &snapped, 1).unwrap().1;
        let space = FeatureSpace::per_cell(5, 6, 1, None);
        let attribution = RegionAttribution {
            target: TargetSpec::cell(2, 2, Channel::In, 1),
            grouping: Grouping::PerCell,
            history: 1,
            result: AttributionResult {
                phi: phis.clone(),
                base_value: 0.0,
                full_value: phis.iter().sum(),
                estimator: Estimator::Exact,
            },
            space,
        };
        let split = if proportional { SplitMode::Proportional } else { SplitMode::Equal };
        let t = trajectory_shap(&attribution, &[&index], split).unwrap();
        let assigned: f64 = t.scores.iter().map(|s| s.total).sum::<f64>() + t.residual;
        assert_abs_diff_eq!(assigned, phis.iter().sum::<f64>(), epsilon = 1e-9);
        for s in &t.scores {
            assert_abs_diff_eq!(s.total, s.total_in + s.total_out, epsilon = 1e-12);
            assert_abs_diff_eq!(s.total, s.per_tau.iter().sum::<f64>(), epsilon = 1e-12);
        }
    }

    #[test]
    fn voronoi_tiles_bbox_and_locates_nearest(
        sites in proptest::collection::vec((0.0f64..4.0, 0.0f64..3.0), 1..25),
        probes in proptest::collection::vec((0.0f64..4.0, 0.0f64..3.0), 50),
    ) {
        let gens: Vec<[f64; 2]> = sites.iter().map(|&(x, y)| [x, y]).collect();
        let bbox = Bbox::new(0.0, 0.0, 4.0, 3.0);
        let v = voronoi(&gens, bbox).unwrap();
        let area: f64 = v.cells.iter().map(|c| c.area()).sum();
        assert_abs_diff_eq!(area, bbox.area(), epsilon = 1e-9);
        for &(x, y) in &probes {
            let d = |s: &[f64; 2]| (s[0] - x).hypot(s[1] - y);
            let best = v.sites.iter().map(d).fold(f64::INFINITY, f64::min);
            let got = v.locate([x, y]);
            prop_assert!(d(&v.sites[got]) <= best + 1e-9);
        }
    }
}
