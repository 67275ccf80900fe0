//! Randomised invariant checks over the core operations: orderings, the
//! envelope rule, robustness grids, partitions, distribution identities,
//! bound formulas, and file round trips. Each block drives one documented
//! invariant at generated inputs; fixed edge cases live with the units.

use std::sync::Arc;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

use atl_core::atl::{fit_atl, AtlConfig};
use atl_core::diagnostics::{
    check_margin_assumption, check_smoothness, lower_density, rate_bounds, risk, risk_bayes,
    RiskMode,
};
use atl_core::distributions::{
    transfer_value, MarginalSpec, PairSpec, RegressionSpec, TransferMapSpec,
};
use atl_core::model::{
    ClassifierHandle, Dataset, DecisionTreeFunction, DecisionTreePartition, LabeledSample, Origin,
    ParameterVector, SplitStep,
};
use atl_core::neighbours::{
    lepski_k_source, lepski_k_target, neighbour_order, source_margin, target_margin,
    RobustnessGrid, SigmaGridSpec,
};
use atl_core::tree_search::{enumerate_restricted_trees, SearchMode, TauMode, TreeSearchStrategy};

fn dataset(points: &[Vec<f64>], labels: &[u8], origin: Origin) -> Dataset {
    let d = points[0].len();
    let samples = points
        .iter()
        .zip(labels)
        .map(|(p, &y)| LabeledSample::new(p.clone(), y).unwrap())
        .collect();
    Dataset::new(samples, origin, d).unwrap()
}

/// Points in the unit cube together with a query point of the same dimension.
fn cloud_and_query() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..=3).prop_flat_map(|d| {
        (
            prop::collection::vec(prop::collection::vec(0.0..1.0f64, d), 2..24),
            prop::collection::vec(0.0..1.0f64, d),
        )
    })
}

proptest! {
    // Ordering by distance returns a permutation, with equal distances
    // resolved by ascending original index.
    #[test]
    fn ordering_is_a_tie_stable_permutation(
        (mut points, query) in cloud_and_query(),
        duplicate_first in any::<bool>(),
    ) {
        if duplicate_first {
            let p = points[0].clone();
            let last = points.len() - 1;
            points[last] = p;
        }
        let labels = vec![0u8; points.len()];
        let data = dataset(&points, &labels, Origin::TargetQ);
        let order = neighbour_order(&data, &query).unwrap();
        let n = order.len();
        let dist = |p: &[f64]| -> f64 {
            p.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        for j in 1..n {
            let prev = dist(order.point_along(j - 1));
            let cur = dist(order.point_along(j));
            prop_assert!(prev <= cur);
            if prev == cur {
                prop_assert!(order.original_index(j - 1) < order.original_index(j));
            }
        }
        let mut seen: Vec<usize> = (0..n).map(|j| order.original_index(j)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}

proptest! {
    // The adaptive neighbourhood size stays in 1..=n and never shrinks when
    // the robustness value grows; with the constant-1/2 calibration function
    // the source margin runs the same accumulation as the target margin, so
    // the two agree exactly, and margins are averages of values in [-1, 1].
    #[test]
    fn envelope_rule_is_monotone_and_bounded(
        (points, query) in cloud_and_query(),
        label_bits in prop::collection::vec(0u8..2, 24),
        lo in 0.02..4.0f64,
        hi in 0.02..4.0f64,
        k_frac in 0.0..1.0f64,
    ) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let labels: Vec<u8> = (0..points.len()).map(|i| label_bits[i]).collect();
        let data = dataset(&points, &labels, Origin::TargetQ);
        let order = neighbour_order(&data, &query).unwrap();
        let n = order.len();
        let k_lo = lepski_k_target(&order, &labels, lo).unwrap();
        let k_hi = lepski_k_target(&order, &labels, hi).unwrap();
        prop_assert!(1 <= k_lo && k_lo <= k_hi && k_hi <= n);
        let h = DecisionTreeFunction::constant_half(data.dim());
        prop_assert_eq!(lepski_k_source(&order, &labels, &h, lo).unwrap(), k_lo);
        let k = 1 + (((n - 1) as f64) * k_frac) as usize;
        let m_source = source_margin(&order, &labels, &h, k).unwrap();
        let m_target = target_margin(&order, &labels, k).unwrap();
        prop_assert_eq!(m_source, m_target);
        prop_assert!(m_target.abs() <= 1.0);
    }
}

proptest! {
    // Geometric robustness grids are strictly ascending subsamples of the
    // full lattice {j/n}, anchored at 1/n and n.
    #[test]
    fn geometric_grids_live_on_the_sample_lattice(n in 2usize..1500, points in 2usize..=64) {
        let grid = RobustnessGrid::geometric(n, points).unwrap();
        let v = grid.values();
        let nf = n as f64;
        prop_assert!(v.len() <= points);
        prop_assert_eq!(v[0], 1.0 / nf);
        prop_assert_eq!(v[v.len() - 1], nf);
        for (i, &s) in v.iter().enumerate() {
            prop_assert_eq!((s * nf).round() / nf, s);
            prop_assert!(s >= 1.0 / nf && s <= nf);
            if i > 0 {
                prop_assert!(v[i - 1] < s);
            }
        }
    }
}

/// Materialise each cell of a refinement sequence as its accumulated
/// half-space constraints: `(axis, threshold, keep_upper)`. Splitting a cell
/// keeps the upper side in place and appends the lower side as a new cell.
fn replayed_cells(steps: &[SplitStep]) -> Vec<Vec<(usize, f64, bool)>> {
    let mut cells: Vec<Vec<(usize, f64, bool)>> = vec![Vec::new()];
    for step in steps {
        let mut lower = cells[step.leaf].clone();
        lower.push((step.axis, step.threshold, false));
        cells[step.leaf].push((step.axis, step.threshold, true));
        cells.push(lower);
    }
    cells
}

proptest! {
    // Every point of the space belongs to exactly one cell of the replayed
    // partition, and that cell is the one the leaf lookup reports.
    #[test]
    fn every_point_lands_in_exactly_one_cell(
        (d, raw_steps, xs) in (1usize..=3).prop_flat_map(|d| {
            (
                Just(d),
                prop::collection::vec((0usize..100, 0usize..3, 0.0..1.0f64), 0..6),
                prop::collection::vec(prop::collection::vec(0.0..1.0f64, d), 1..25),
            )
        }),
    ) {
        let steps: Vec<SplitStep> = raw_steps
            .iter()
            .enumerate()
            .map(|(i, &(leaf, axis, threshold))| SplitStep {
                leaf: leaf % (i + 1),
                axis: axis % d,
                threshold,
            })
            .collect();
        let partition = DecisionTreePartition::new(d, steps.clone()).unwrap();
        let cells = replayed_cells(&steps);
        prop_assert_eq!(cells.len(), partition.leaf_count());
        for x in &xs {
            let members: Vec<usize> = cells
                .iter()
                .enumerate()
                .filter(|(_, constraints)| {
                    constraints.iter().all(|&(axis, thr, upper)| {
                        if upper { x[axis] >= thr } else { x[axis] < thr }
                    })
                })
                .map(|(c, _)| c)
                .collect();
            prop_assert_eq!(members.len(), 1);
            prop_assert_eq!(members[0], partition.leaf_of(x).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    // Candidate trees carry calibration values on the 1/grid_n lattice, one
    // per cell, and regeneration with the same seed reproduces the list.
    #[test]
    fn candidate_trees_snap_values_to_the_grid(
        (points, labels) in (1usize..=2).prop_flat_map(|d| {
            (2usize..7).prop_flat_map(move |n| {
                (
                    prop::collection::vec(prop::collection::vec(0.0..1.0f64, d), n),
                    prop::collection::vec(0u8..2, n),
                )
            })
        }),
        l in 1usize..=2,
        greedy in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let grid_n = points.len();
        let strategy = TreeSearchStrategy {
            mode: if greedy {
                SearchMode::Greedy { max_leaves: 3 }
            } else {
                SearchMode::MonteCarlo { num_splits: 12 }
            },
            tau_mode: TauMode::LeafMeanPlusLocalGrid { radius: 0.3, grid_size: 5 },
        };
        let trees =
            enumerate_restricted_trees(&points, Some(&labels), l, grid_n, &strategy, seed).unwrap();
        prop_assert!(!trees.is_empty());
        let again =
            enumerate_restricted_trees(&points, Some(&labels), l, grid_n, &strategy, seed).unwrap();
        prop_assert_eq!(&trees, &again);
        for tree in &trees {
            prop_assert_eq!(tree.grid_n, Some(grid_n));
            prop_assert_eq!(tree.taus.len(), tree.partition.leaf_count());
            for &t in &tree.taus {
                prop_assert!((0.0..=1.0).contains(&t));
                prop_assert_eq!((t * grid_n as f64).round() / grid_n as f64, t);
            }
        }
    }
}

/// A small fit configuration: two explicit robustness values per side, leaf
/// budgets 0 and 1, and a cheap candidate search.
fn quick_config(seed: u64) -> AtlConfig {
    AtlConfig {
        sigma_grid_p: SigmaGridSpec::Explicit { values: vec![0.5, 2.0] },
        sigma_grid_q: SigmaGridSpec::Explicit { values: vec![0.5, 2.0] },
        l_values: vec![0, 1],
        tree_strategy: TreeSearchStrategy {
            mode: SearchMode::MonteCarlo { num_splits: 4 },
            tau_mode: TauMode::LeafMeanPlusLocalGrid { radius: 0.3, grid_size: 3 },
        },
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    // The fitted model picks the first holdout minimiser of its family, and
    // the family itself is a function of the source data and the calibration
    // half only: flipping holdout labels changes selection, never members.
    #[test]
    fn fitting_selects_the_first_holdout_minimiser(
        source in prop::collection::vec((prop::collection::vec(0.0..1.0f64, 2), 0u8..2), 0..6),
        target in prop::collection::vec((prop::collection::vec(0.0..1.0f64, 2), 0u8..2), 4..12),
        probes in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 2), 5),
        seed in any::<u64>(),
    ) {
        let (p_points, p_labels): (Vec<_>, Vec<_>) = source.into_iter().unzip();
        let (q_points, q_labels): (Vec<_>, Vec<_>) = target.into_iter().unzip();
        let d_p = if p_points.is_empty() {
            Dataset::new(Vec::new(), Origin::SourceP, 2).unwrap()
        } else {
            dataset(&p_points, &p_labels, Origin::SourceP)
        };
        let d_q = dataset(&q_points, &q_labels, Origin::TargetQ);
        let cfg = quick_config(seed);
        let model = fit_atl(&d_p, &d_q, &cfg).unwrap();

        prop_assert_eq!(
            model.holdout_errors.len(),
            model.family_p.len() + model.family_q.len()
        );
        let best = *model.holdout_errors.iter().min().unwrap();
        prop_assert_eq!(model.holdout_errors[model.chosen_index], best);
        for &e in &model.holdout_errors[..model.chosen_index] {
            prop_assert!(e > best);
        }
        if d_p.is_empty() {
            prop_assert!(model.family_p.is_empty());
            let target_side = matches!(model.chosen, ClassifierHandle::TargetKnn { .. });
            prop_assert!(target_side);
        }

        let flipped_labels: Vec<u8> = q_labels
            .iter()
            .enumerate()
            .map(|(i, &y)| if i >= model.split_index { 1 - y } else { y })
            .collect();
        let flipped = dataset(&q_points, &flipped_labels, Origin::TargetQ);
        let other = fit_atl(&d_p, &flipped, &cfg).unwrap();
        prop_assert_eq!(model.family_p.len(), other.family_p.len());
        prop_assert_eq!(model.family_q.len(), other.family_q.len());
        let pairs = model
            .family_p
            .iter()
            .zip(&other.family_p)
            .chain(model.family_q.iter().zip(&other.family_q));
        for (a, b) in pairs {
            for x in &probes {
                prop_assert_eq!(a.classify(x).unwrap(), b.classify(x).unwrap());
            }
        }
    }
}

fn transfer_map_strategy() -> impl Strategy<Value = TransferMapSpec> {
    prop_oneof![
        Just(TransferMapSpec::Identity),
        (0.0..=1.0f64, 0.0..=1.0f64)
            .prop_map(|(a, end)| TransferMapSpec::Affine { a, b: end - a }),
        Just(TransferMapSpec::PiecewiseSetting2Lower),
        Just(TransferMapSpec::PiecewiseSetting2Upper),
        (0.0..=0.25f64).prop_map(|eps| TransferMapSpec::LowerBoundH { eps }),
        (0.05..=1.0f64, 0.0..=0.5f64)
            .prop_map(|(phi, t)| TransferMapSpec::PlateauH { phi, delta: t * phi }),
    ]
}

proptest! {
    // Transfer maps keep regression values inside [0, 1]; the plateau map
    // contracts by at most its slope and offset, and the steep three-piece
    // map never drops below the advertised centred slope.
    #[test]
    fn transfer_maps_preserve_the_unit_interval(
        map in transfer_map_strategy(),
        z in 0.0..=1.0f64,
    ) {
        let v = transfer_value(&map, z).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        match map {
            TransferMapSpec::PlateauH { phi, delta } => {
                prop_assert!((v - 0.5).abs() + 1e-12 >= phi * (z - 0.5).abs() - delta);
            }
            TransferMapSpec::LowerBoundH { eps } => {
                if (z - 0.5).abs() > 1e-9 {
                    let centre = transfer_value(&map, 0.5).unwrap();
                    let slope = (v - centre) / (z - 0.5);
                    prop_assert!(slope + 1e-9 >= 1.0 - 4.0 * eps);
                }
            }
            _ => {}
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    // The two-component mixture has total mass exactly one, its sampler only
    // produces support points, and with an admissible signal level the
    // lattice regression function obeys its own increment bound there.
    #[test]
    fn lattice_mixture_mass_and_regression_increments(
        q in 2usize..=3,
        r in 0.1..0.9f64,
        w in 0.0..=0.5f64,
        (d_q, d_p, d0) in (1usize..=2).prop_flat_map(|d_q| {
            (d_q..=3).prop_flat_map(move |d_p| {
                (Just(d_q), Just(d_p), prop::sample::select(vec![d_q, d_p]))
            })
        }),
        beta in 0.3..=1.0f64,
        eps_frac in 0.0..=1.0f64,
        sign_bits in prop::collection::vec(any::<bool>(), 9),
        seed in any::<u64>(),
    ) {
        let d = d_p;
        let mixture = MarginalSpec::LatticeMixture { q, r, w, d0, d_q, d_p, d };
        let cube = mixture.lattice_cube_mass().unwrap();
        let atom = mixture.lattice_atom_mass().unwrap();
        let count = mixture.lattice_atom_count().unwrap();
        prop_assert!(cube >= 0.0 && atom >= 0.0);
        prop_assert!((cube + count as f64 * atom - 1.0).abs() <= 1e-12);

        let spacing = mixture.lattice_spacing().unwrap();
        let eps = eps_frac * 0.125f64.min(spacing.powf(beta) / 6.0);
        let signs: Vec<i8> = sign_bits
            .iter()
            .take(q.pow(d_q as u32))
            .map(|&b| if b { 1 } else { -1 })
            .collect();
        let eta = RegressionSpec::LatticeEta { eps, beta, q, r, d_q, d_p, d, signs };
        eta.validate().unwrap();

        let mut rng = StdRng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..12).map(|_| mixture.sample_point(&mut rng)).collect();
        for x in &points {
            let value = eta.eval(x).unwrap();
            prop_assert!((0.0..=1.0).contains(&value));
        }
        for pair in points.chunks(2) {
            if let [a, b] = pair {
                let gap = (eta.eval(a).unwrap() - eta.eval(b).unwrap()).abs();
                let dist: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                prop_assert!(gap <= dist.powf(beta) + 1e-9);
            }
        }
    }
}

/// A valid parameter vector with moderate ranges for scan properties.
fn theta_strategy() -> impl Strategy<Value = ParameterVector> {
    (
        (0.0..0.8f64, 0.1..=1.0f64, 1u64..4, 1u64..=3),
        (0.0..=1.0f64, 0.0..=1.0f64, 0.3..3.0f64, 0.3..3.0f64),
        (1.1..5.0f64, 0.2..2.5f64, 1.0..3.0f64, 0.1..=1.0f64, 1.0..3.0f64),
    )
        .prop_map(|((delta, phi, l_star, d), (t_q, t_p, gamma_q, gamma_p), rest)| {
            let (c_pq, alpha, c_m, beta, c_s) = rest;
            let df = d as f64;
            let d_q = 1.0 + t_q * (df - 1.0);
            let d_p = d_q + t_p * (df - d_q);
            ParameterVector {
                delta,
                phi,
                l_star,
                d,
                d_q,
                gamma_q,
                d_p,
                gamma_p,
                c_pq,
                alpha,
                c_m,
                beta,
                c_s,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]
    // Along geometric sample-size scans the matching bound terms never grow,
    // each lower term stays below its upper partner, and the assembled lower
    // bound never exceeds one.
    #[test]
    fn bound_terms_shrink_along_scans(
        theta in theta_strategy(),
        n_p0 in 1usize..50,
        n_q0 in 2usize..50,
        confidence in prop_oneof![Just(None), (0.01..0.5f64).prop_map(Some)],
    ) {
        let mut prev_a = f64::INFINITY;
        for i in 0..8 {
            let b = rate_bounds(&theta, n_p0 << (2 * i), n_q0, confidence).unwrap();
            prop_assert!(b.a_lower <= prev_a + 1e-12);
            prev_a = b.a_lower;
            prop_assert!(b.a_lower <= b.a_upper + 1e-12);
            prop_assert!(b.b_lower <= b.b_upper + 1e-12);
            prop_assert!(b.overall_lower <= b.overall_upper + 1e-12);
            prop_assert!(b.overall_lower <= 1.0 + 1e-12);
        }

        let (mut prev_bl, mut prev_bu, mut prev_d) =
            (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        for i in 0..8 {
            let b = rate_bounds(&theta, n_p0, n_q0 << (2 * i), confidence).unwrap();
            prop_assert!(b.b_lower <= prev_bl + 1e-12);
            prop_assert!(b.b_upper <= prev_bu + 1e-12);
            prop_assert!(b.d_term <= prev_d + 1e-12);
            prev_bl = b.b_lower;
            prev_bu = b.b_upper;
            prev_d = b.d_term;
        }

        // A stronger transfer signal can only help the source-side terms.
        let mut scan = theta.clone();
        let (mut prev_al, mut prev_au) = (f64::INFINITY, f64::INFINITY);
        for i in 0..10 {
            scan.phi = 0.1 + 0.1 * i as f64;
            let b = rate_bounds(&scan, n_p0, n_q0, confidence).unwrap();
            prop_assert!(b.a_lower <= prev_al + 1e-12);
            prop_assert!(b.a_upper <= prev_au + 1e-12);
            prev_al = b.a_lower;
            prev_au = b.a_upper;
        }

        // With no plateau and no drift the upper source term is a pure
        // log-over-size power, so it shrinks along the scan as well.
        let mut clean = theta.clone();
        clean.phi = 1.0;
        clean.delta = 0.0;
        let mut prev = f64::INFINITY;
        for i in 0..8 {
            let b = rate_bounds(&clean, n_p0 << (2 * i), n_q0, confidence).unwrap();
            prop_assert!(b.a_upper <= prev + 1e-12);
            prev = b.a_upper;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    // Under a shared quadrature grid no classifier undercuts the optimal
    // rule, and the optimal rule itself has zero excess.
    #[test]
    fn no_classifier_beats_the_optimal_rule(
        constant in prop_oneof![Just(None), (0u8..2).prop_map(Some)],
        refs in prop::collection::vec((prop::collection::vec(0.0..1.0f64, 2), 0u8..2), 2..8),
        sigma in 0.05..5.0f64,
    ) {
        let handle = match constant {
            Some(label) => ClassifierHandle::constant(label).unwrap(),
            None => {
                let (points, labels): (Vec<_>, Vec<_>) = refs.into_iter().unzip();
                let data = dataset(&points, &labels, Origin::TargetQ);
                ClassifierHandle::target_knn(sigma, Arc::new(data)).unwrap()
            }
        };
        let spec = PairSpec::setting1();
        let mode = RiskMode::Quadrature { points_per_axis: 64 };
        let report = risk(&handle, &spec, &mode).unwrap();
        prop_assert!(report.excess_error >= -1e-12);
        prop_assert!(report.test_error + 1e-12 >= report.bayes_error);
        let optimal = risk_bayes(&spec, &mode).unwrap();
        prop_assert!(optimal.excess_error.abs() <= 1e-12);
        prop_assert_eq!(optimal.bayes_error, report.bayes_error);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    // The density floor is a running minimum over a nested radius grid, so
    // doubling the grid can only lower it.
    #[test]
    fn density_floor_refines_downward(
        case in prop_oneof![
            (0.0..1.0f64).prop_map(|x| (MarginalSpec::UniformCube { d: 1 }, vec![x])),
            (0.5..3.0f64, -2.0..2.0f64)
                .prop_map(|(sigma, x)| (MarginalSpec::GaussianScale { sigma }, vec![x])),
            (0.5..2.0f64, 0.05..2.0f64)
                .prop_map(|(gamma, x)| (MarginalSpec::GammaFamily { gamma }, vec![x])),
        ],
        d0 in 0.5..2.5f64,
    ) {
        let (marginal, x) = case;
        let coarse = lower_density(&marginal, &x, d0, 65).unwrap();
        let fine = lower_density(&marginal, &x, d0, 129).unwrap();
        prop_assert!(fine <= coarse + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    // Writing a dataset and reading it back reproduces it exactly, including
    // the origin tag carried by the sidecar manifest.
    #[test]
    fn dataset_files_round_trip(
        (points, labels) in (1usize..=3).prop_flat_map(|d| {
            (1usize..30).prop_flat_map(move |n| {
                (
                    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n),
                    prop::collection::vec(0u8..2, n),
                )
            })
        }),
        from_source in any::<bool>(),
    ) {
        let origin = if from_source { Origin::SourceP } else { Origin::TargetQ };
        let data = dataset(&points, &labels, origin);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.csv");
        data.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        prop_assert_eq!(back, data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    // Assumption checkers are pure functions of their seed.
    #[test]
    fn assumption_reports_are_reproducible(seed in any::<u64>()) {
        let spec = PairSpec::setting1();
        let first = check_margin_assumption(&spec, 1.0, 2.0, &[0.3], 3000, seed).unwrap();
        let second = check_margin_assumption(&spec, 1.0, 2.0, &[0.3], 3000, seed).unwrap();
        prop_assert_eq!(first, second);
        let s1 = check_smoothness(&spec, Origin::TargetQ, 1.0, 7.0, 400, seed).unwrap();
        let s2 = check_smoothness(&spec, Origin::TargetQ, 1.0, 7.0, 400, seed).unwrap();
        prop_assert_eq!(s1, s2);
    }
}
