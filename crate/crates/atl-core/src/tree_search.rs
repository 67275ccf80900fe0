//! Candidate decision-tree generation and empirical risk minimisation.
//!
//! Three generation strategies are offered: exhaustive enumeration of all
//! achievable restrictions to a point set, Monte-Carlo random refinement
//! sequences, and a CART-style greedy grower. Candidates are deduplicated by
//! their restriction to the point set, because two trees that agree on the
//! reference sample induce identical margin classifiers.
//!
//! Selection is plain empirical risk minimisation: among candidates, pick the
//! one whose induced classifier makes the fewest mistakes on a calibration
//! sample, breaking ties by the lowest candidate index so results do not
//! depend on evaluation order.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::model::{Dataset, DecisionTreeFunction, DecisionTreePartition, Origin, SplitStep};
use crate::neighbours::{lepski_k_source, neighbour_order, source_margin};
use crate::seed::rng_from;
use crate::{Error, Result};

use rand::Rng;

/// How candidate partitions are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SearchMode {
    /// Every achievable restriction to the reference points, via all
    /// refinement sequences over per-axis gap thresholds. Exponential in the
    /// leaf count; intended for small instances and exactness checks.
    ExhaustiveRestricted,
    /// `num_splits` random refinement sequences: each step splits a uniform
    /// existing cell along a uniform axis at the coordinate of a uniformly
    /// chosen reference point.
    MonteCarlo { num_splits: usize },
    /// Grow one split at a time, choosing the split that most reduces
    /// label impurity over the reference points; stop early when no split
    /// improves. Returns every prefix of the grown sequence.
    Greedy { max_leaves: usize },
}

/// How calibration values are assigned to a candidate partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TauMode {
    /// Full product over an evenly spaced per-leaf grid of `grid_size + 1`
    /// values, snapped to the `1/grid_n` lattice. Exponential in the leaf
    /// count; intended for small leaf counts.
    GridSearch { grid_size: usize },
    /// Per leaf, seed at the within-leaf mean of reference labels (snapped to
    /// the lattice) and take `grid_size` evenly spaced values within
    /// `radius` of the seed; candidates are the full product of these local
    /// grids, so the downstream risk minimisation searches the whole box.
    LeafMeanPlusLocalGrid { radius: f64, grid_size: usize },
}

/// Candidate-generation strategy: a partition search mode plus a calibration
/// value search mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSearchStrategy {
    pub mode: SearchMode,
    pub tau_mode: TauMode,
}

impl Default for TreeSearchStrategy {
    fn default() -> Self {
        TreeSearchStrategy {
            mode: SearchMode::MonteCarlo { num_splits: 100 },
            tau_mode: TauMode::LeafMeanPlusLocalGrid {
                radius: 0.3,
                grid_size: 7,
            },
        }
    }
}

impl TreeSearchStrategy {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SearchMode::ExhaustiveRestricted => {}
            SearchMode::MonteCarlo { num_splits } => {
                if num_splits == 0 {
                    return Err(Error::invalid("num_splits must be at least 1"));
                }
            }
            SearchMode::Greedy { max_leaves } => {
                if max_leaves == 0 {
                    return Err(Error::invalid("max_leaves must be at least 1"));
                }
            }
        }
        match self.tau_mode {
            TauMode::GridSearch { grid_size } => {
                if grid_size == 0 {
                    return Err(Error::invalid("grid_size must be at least 1"));
                }
            }
            TauMode::LeafMeanPlusLocalGrid { radius, grid_size } => {
                if grid_size == 0 {
                    return Err(Error::invalid("grid_size must be at least 1"));
                }
                if !(radius > 0.0) || !radius.is_finite() {
                    return Err(Error::invalid("radius must be positive and finite"));
                }
            }
        }
        Ok(())
    }
}

/// Hard cap on the number of candidate trees one enumeration may produce.
const CANDIDATE_CAP: usize = 1_000_000;

/// Upper bound on the number of distinct tree restrictions to `n` points in
/// `d` dimensions with `l` leaves: `(l * d * (n + 1))^(2 l)`.
///
/// Each of the at most `l - 1` refinement steps chooses one of at most
/// `l - 1` cells, one of `d` axes and one of at most `n + 1` threshold gaps,
/// and each of the `l` cells takes one of `n + 1` lattice values, all of
/// which is dominated by the stated power.
pub fn restriction_count_bound(l: usize, d: usize, n: usize) -> Result<u128> {
    if l == 0 || d == 0 {
        return Err(Error::invalid("bound needs l >= 1 and d >= 1"));
    }
    let base = (l as u128)
        .checked_mul(d as u128)
        .and_then(|v| v.checked_mul(n as u128 + 1))
        .ok_or_else(|| Error::invalid("bound base overflows"))?;
    base.checked_pow(2 * l as u32)
        .ok_or_else(|| Error::invalid("bound overflows u128"))
}

/// Snap a value to the `1/grid_n` lattice, clamped to `[0, 1]`.
fn snap(v: f64, grid_n: usize) -> f64 {
    let g = grid_n as f64;
    ((v.clamp(0.0, 1.0) * g).round()) / g
}

/// Representative thresholds along one axis: one value per achievable side
/// assignment of the points. Splitting at a point's coordinate keeps that
/// point on the retained (`>=`) side; one extra value beyond the maximum
/// realises the assignment with every point on the complement side.
fn threshold_representatives(points: &[Vec<f64>], axis: usize) -> Vec<f64> {
    let mut coords: Vec<f64> = points.iter().map(|p| p[axis]).collect();
    coords.sort_by(f64::total_cmp);
    coords.dedup();
    if let Some(&max) = coords.last() {
        coords.push(max_next_up(max));
    }
    coords
}

fn max_next_up(v: f64) -> f64 {
    let up = v + 1.0;
    if up > v {
        up
    } else {
        f64::next_up(v)
    }
}

/// Cell indices of each point, relabelled by first occurrence so that
/// partitions that differ only in cell numbering compare equal.
fn normalized_restriction(partition: &DecisionTreePartition, points: &[Vec<f64>]) -> Vec<usize> {
    let mut map: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let cell = partition
            .leaf_of(p)
            .expect("points and partition dimensions match");
        let id = match map.iter().position(|&c| c == cell) {
            Some(pos) => pos,
            None => {
                map.push(cell);
                map.len() - 1
            }
        };
        out.push(id);
    }
    out
}

/// All partitions with exactly `l` cells whose restrictions to `points`
/// cover every restriction achievable by axis-aligned refinement, one
/// representative per distinct (relabelled) restriction.
fn exhaustive_partitions(
    points: &[Vec<f64>],
    d: usize,
    l: usize,
) -> Vec<DecisionTreePartition> {
    let reps: Vec<Vec<f64>> = (0..d)
        .map(|axis| threshold_representatives(points, axis))
        .collect();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::new();
    let mut steps: Vec<SplitStep> = Vec::with_capacity(l - 1);

    fn recurse(
        d: usize,
        l: usize,
        reps: &[Vec<f64>],
        points: &[Vec<f64>],
        steps: &mut Vec<SplitStep>,
        seen: &mut HashSet<Vec<usize>>,
        out: &mut Vec<DecisionTreePartition>,
    ) {
        if steps.len() == l - 1 {
            let partition = DecisionTreePartition::new(points[0].len(), steps.clone())
                .expect("steps are valid by construction");
            if seen.insert(normalized_restriction(&partition, points)) {
                out.push(partition);
            }
            return;
        }
        let cells = steps.len() + 1;
        for leaf in 0..cells {
            for axis in 0..d {
                for &threshold in &reps[axis] {
                    steps.push(SplitStep {
                        leaf,
                        axis,
                        threshold,
                    });
                    recurse(d, l, reps, points, steps, seen, out);
                    steps.pop();
                }
            }
        }
    }

    recurse(d, l, &reps, points, &mut steps, &mut seen, &mut out);
    out
}

/// `num_splits` random refinement sequences with `l - 1` steps each,
/// deduplicated by restriction (first occurrence kept).
fn monte_carlo_partitions(
    points: &[Vec<f64>],
    d: usize,
    l: usize,
    num_splits: usize,
    seed: u64,
) -> Vec<DecisionTreePartition> {
    let mut rng = rng_from(seed, &[]);
    let n = points.len();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..num_splits {
        let mut steps = Vec::with_capacity(l - 1);
        for s in 0..l - 1 {
            let cells = s + 1;
            let leaf = rng.gen_range(0..cells);
            let axis = rng.gen_range(0..d);
            let idx = rng.gen_range(0..n);
            steps.push(SplitStep {
                leaf,
                axis,
                threshold: points[idx][axis],
            });
        }
        let partition =
            DecisionTreePartition::new(d, steps).expect("steps are valid by construction");
        if seen.insert(normalized_restriction(&partition, points)) {
            out.push(partition);
        }
    }
    out
}

/// Weighted impurity `sum_cells (n_c / n) p_c (1 - p_c)` of a label split.
fn impurity(cell_ids: &[usize], labels: &[u8], cells: usize) -> f64 {
    let mut count = vec![0usize; cells];
    let mut ones = vec![0usize; cells];
    for (&c, &y) in cell_ids.iter().zip(labels) {
        count[c] += 1;
        ones[c] += usize::from(y);
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for c in 0..cells {
        if count[c] > 0 {
            let p = ones[c] as f64 / count[c] as f64;
            total += (count[c] as f64 / n) * p * (1.0 - p);
        }
    }
    total
}

/// Greedily grown refinement sequence: every prefix partition, from the
/// trivial one up to `l` cells or until no split strictly reduces impurity.
fn greedy_partitions(
    points: &[Vec<f64>],
    labels: &[u8],
    d: usize,
    l: usize,
) -> Vec<DecisionTreePartition> {
    let mut out = vec![DecisionTreePartition::trivial(d)];
    let mut steps: Vec<SplitStep> = Vec::new();
    let mut cell_ids: Vec<usize> = vec![0; points.len()];
    let mut current = impurity(&cell_ids, labels, 1);

    while steps.len() + 1 < l {
        let cells = steps.len() + 1;
        let mut best: Option<(f64, SplitStep)> = None;
        for leaf in 0..cells {
            let members: Vec<usize> = (0..points.len())
                .filter(|&i| cell_ids[i] == leaf)
                .collect();
            if members.is_empty() {
                continue;
            }
            let member_points: Vec<Vec<f64>> =
                members.iter().map(|&i| points[i].clone()).collect();
            for axis in 0..d {
                for threshold in threshold_representatives(&member_points, axis) {
                    let mut ids = cell_ids.clone();
                    for &i in &members {
                        if points[i][axis] < threshold {
                            ids[i] = cells;
                        }
                    }
                    let value = impurity(&ids, labels, cells + 1);
                    let better = match &best {
                        None => true,
                        Some((b, _)) => value < *b,
                    };
                    if better {
                        best = Some((
                            value,
                            SplitStep {
                                leaf,
                                axis,
                                threshold,
                            },
                        ));
                    }
                }
            }
        }
        match best {
            Some((value, step)) if value < current - 1e-12 => {
                let cells_before = steps.len() + 1;
                for (i, id) in cell_ids.iter_mut().enumerate() {
                    if *id == step.leaf && points[i][step.axis] < step.threshold {
                        *id = cells_before;
                    }
                }
                steps.push(step);
                current = value;
                out.push(
                    DecisionTreePartition::new(d, steps.clone())
                        .expect("steps are valid by construction"),
                );
            }
            _ => break,
        }
    }
    out
}

/// Per-leaf calibration value lists under a tau mode.
fn leaf_value_lists(
    partition: &DecisionTreePartition,
    points: &[Vec<f64>],
    labels: Option<&[u8]>,
    grid_n: usize,
    tau_mode: &TauMode,
) -> Result<Vec<Vec<f64>>> {
    let cells = partition.leaf_count();
    match tau_mode {
        TauMode::GridSearch { grid_size } => {
            let mut values: Vec<f64> = (0..=*grid_size)
                .map(|j| snap(j as f64 / *grid_size as f64, grid_n))
                .collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            Ok(vec![values; cells])
        }
        TauMode::LeafMeanPlusLocalGrid { radius, grid_size } => {
            let labels = labels.ok_or_else(|| {
                Error::invalid("leaf-mean calibration search needs reference labels")
            })?;
            if labels.len() != points.len() {
                return Err(Error::invalid("one label per reference point is required"));
            }
            let mut count = vec![0usize; cells];
            let mut ones = vec![0usize; cells];
            for (p, &y) in points.iter().zip(labels) {
                let c = partition.leaf_of(p)?;
                count[c] += 1;
                ones[c] += usize::from(y);
            }
            let mut lists = Vec::with_capacity(cells);
            for c in 0..cells {
                let seed_value = if count[c] > 0 {
                    snap(ones[c] as f64 / count[c] as f64, grid_n)
                } else {
                    snap(0.5, grid_n)
                };
                let mut values = Vec::with_capacity(*grid_size);
                if *grid_size == 1 {
                    values.push(seed_value);
                } else {
                    for j in 0..*grid_size {
                        let raw = seed_value - radius
                            + 2.0 * radius * j as f64 / (*grid_size - 1) as f64;
                        values.push(snap(raw, grid_n));
                    }
                }
                values.sort_by(f64::total_cmp);
                values.dedup();
                lists.push(values);
            }
            Ok(lists)
        }
    }
}

/// The full `1/grid_n` lattice per leaf, used by exhaustive enumeration.
fn full_lattice_lists(cells: usize, grid_n: usize) -> Vec<Vec<f64>> {
    let values: Vec<f64> = (0..=grid_n).map(|j| j as f64 / grid_n as f64).collect();
    vec![values; cells]
}

/// Append every combination of per-leaf values as a tree, deduplicating by
/// the tree's value vector on `points` and enforcing the candidate cap.
fn expand_taus(
    partition: &DecisionTreePartition,
    lists: &[Vec<f64>],
    points: &[Vec<f64>],
    grid_n: usize,
    seen_values: &mut HashSet<Vec<u64>>,
    out: &mut Vec<DecisionTreeFunction>,
) -> Result<()> {
    let cells = partition.leaf_count();
    let combos: usize = lists.iter().map(Vec::len).try_fold(1usize, |acc, len| {
        acc.checked_mul(len)
            .filter(|&c| c <= CANDIDATE_CAP)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "calibration search exceeds the candidate cap of {CANDIDATE_CAP}"
                ))
            })
    })?;
    if out.len().saturating_add(combos) > CANDIDATE_CAP {
        return Err(Error::invalid(format!(
            "candidate enumeration exceeds the cap of {CANDIDATE_CAP}"
        )));
    }
    let cell_of: Vec<usize> = points
        .iter()
        .map(|p| partition.leaf_of(p).expect("dimensions match"))
        .collect();
    let mut idx = vec![0usize; cells];
    loop {
        let taus: Vec<f64> = (0..cells).map(|c| lists[c][idx[c]]).collect();
        let key: Vec<u64> = cell_of.iter().map(|&c| taus[c].to_bits()).collect();
        if seen_values.insert(key) {
            out.push(
                DecisionTreeFunction::new(partition.clone(), taus, Some(grid_n))
                    .expect("values are snapped to the lattice"),
            );
        }
        // Odometer increment over the per-leaf lists.
        let mut c = 0;
        loop {
            if c == cells {
                return Ok(());
            }
            idx[c] += 1;
            if idx[c] < lists[c].len() {
                break;
            }
            idx[c] = 0;
            c += 1;
        }
    }
}

/// Generate candidate trees with `l` leaves for a reference point set.
///
/// `labels` (one per point, in point order) are required by the greedy mode
/// and by the leaf-mean calibration search; `seed` drives the Monte-Carlo
/// mode and is ignored otherwise. Calibration values lie on the `1/grid_n`
/// lattice. Candidates are deduplicated by their value vector on `points`,
/// keeping the first occurrence, so the output order is deterministic.
///
/// Exhaustive mode searches the full lattice per leaf regardless of the
/// strategy's tau mode; the other modes assign values per the tau mode.
pub fn enumerate_restricted_trees(
    points: &[Vec<f64>],
    labels: Option<&[u8]>,
    l: usize,
    grid_n: usize,
    strategy: &TreeSearchStrategy,
    seed: u64,
) -> Result<Vec<DecisionTreeFunction>> {
    if l == 0 {
        return Err(Error::invalid(
            "l = 0 denotes the constant-1/2 function and is not enumerable",
        ));
    }
    if points.is_empty() {
        return Err(Error::invalid("reference point set must be nonempty"));
    }
    if grid_n == 0 {
        return Err(Error::invalid("grid_n must be at least 1"));
    }
    strategy.validate()?;
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("points must share a positive dimension"));
    }
    if let Some(ls) = labels {
        if ls.len() != points.len() {
            return Err(Error::invalid("one label per reference point is required"));
        }
    }

    let partitions = match strategy.mode {
        SearchMode::ExhaustiveRestricted => exhaustive_partitions(points, d, l),
        SearchMode::MonteCarlo { num_splits } => {
            monte_carlo_partitions(points, d, l, num_splits, seed)
        }
        SearchMode::Greedy { max_leaves } => {
            let labels = labels.ok_or_else(|| {
                Error::invalid("greedy tree growth needs reference labels")
            })?;
            greedy_partitions(points, labels, d, l.min(max_leaves))
        }
    };

    let mut seen_values: HashSet<Vec<u64>> = HashSet::new();
    let mut out = Vec::new();
    for partition in &partitions {
        let lists = match strategy.mode {
            SearchMode::ExhaustiveRestricted => full_lattice_lists(partition.leaf_count(), grid_n),
            _ => leaf_value_lists(partition, points, labels, grid_n, &strategy.tau_mode)?,
        };
        expand_taus(partition, &lists, points, grid_n, &mut seen_values, &mut out)?;
    }
    Ok(out)
}

/// Empirical error counts of candidate trees on a calibration sample.
///
/// Tree `h` classifies a calibration point as 1 exactly when the calibrated
/// source margin at the adaptively chosen neighbourhood size is nonnegative;
/// the count is the number of calibration labels that disagree.
pub fn erm_tree_error_counts(
    candidates: &[DecisionTreeFunction],
    sigma: f64,
    source: &Dataset,
    calib: &Dataset,
) -> Result<Vec<usize>> {
    if source.origin() != Origin::SourceP {
        return Err(Error::invalid("tree selection needs source-tagged reference data"));
    }
    if calib.origin() != Origin::TargetQ {
        return Err(Error::invalid("tree selection needs target-tagged calibration data"));
    }
    if source.is_empty() {
        return Err(Error::invalid("source data must be nonempty"));
    }
    if calib.dim() != source.dim() {
        return Err(Error::invalid("source and calibration dimensions differ"));
    }
    let labels = source.labels();
    let mut counts = vec![0usize; candidates.len()];
    for i in 0..calib.len() {
        let order = neighbour_order(source, calib.features(i))?;
        let y = calib.label(i);
        for (c, h) in candidates.iter().enumerate() {
            let k = lepski_k_source(&order, &labels, h, sigma)?;
            let m = source_margin(&order, &labels, h, k)?;
            let pred = u8::from(m >= 0.0);
            counts[c] += usize::from(pred != y);
        }
    }
    Ok(counts)
}

/// Select the candidate tree with the fewest calibration errors, breaking
/// ties by the lowest candidate index.
pub fn erm_select_tree(
    candidates: &[DecisionTreeFunction],
    sigma: f64,
    source: &Dataset,
    calib: &Dataset,
) -> Result<DecisionTreeFunction> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidate list must be nonempty"));
    }
    let counts = erm_tree_error_counts(candidates, sigma, source, calib)?;
    let best = argmin_first(&counts);
    Ok(candidates[best].clone())
}

/// Misclassification counts of classifier handles on a holdout sample.
pub fn erm_classifier_error_counts(
    family: &[crate::model::ClassifierHandle],
    holdout: &Dataset,
) -> Result<Vec<usize>> {
    if holdout.origin() != Origin::TargetQ {
        return Err(Error::invalid("final selection needs target-tagged holdout data"));
    }
    let mut counts = vec![0usize; family.len()];
    for i in 0..holdout.len() {
        let x = holdout.features(i);
        let y = holdout.label(i);
        for (c, f) in family.iter().enumerate() {
            counts[c] += usize::from(f.classify(x)? != y);
        }
    }
    Ok(counts)
}

/// Select the handle with the fewest holdout errors, breaking ties by the
/// lowest index.
pub fn erm_select_classifier(
    family: &[crate::model::ClassifierHandle],
    holdout: &Dataset,
) -> Result<crate::model::ClassifierHandle> {
    if family.is_empty() {
        return Err(Error::invalid("classifier family must be nonempty"));
    }
    if holdout.is_empty() {
        return Err(Error::invalid("holdout sample must be nonempty"));
    }
    let counts = erm_classifier_error_counts(family, holdout)?;
    Ok(family[argmin_first(&counts)].clone())
}

/// Index of the first minimum. The scan order is the candidate order, so the
/// result is independent of how the counts were computed.
pub(crate) fn argmin_first(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c < counts[best] {
            best = i;
        }
    }
    best
}
