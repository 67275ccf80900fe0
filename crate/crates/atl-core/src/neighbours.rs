//! Nearest-neighbour orderings, calibrated margins, and the adaptive
//! neighbourhood-size rule.
//!
//! The margin of a query point is the average, over its `k` nearest
//! reference samples, of the label minus a calibration value: a decision-tree
//! prediction for source data, the constant 1/2 for target data. The
//! neighbourhood size is chosen per query by a self-similarity rule: take the
//! longest prefix of neighbourhood sizes on which the margin stays inside a
//! noise envelope `sigma / sqrt(r)`, then add one.

use serde::{Deserialize, Serialize};

use crate::model::{dist_sq, Dataset, DecisionTreeFunction};
use crate::{Error, Result};

/// The nearest-neighbour ordering of a reference set around one query point.
///
/// `perm[j]` is the original index of the `j`-th nearest reference point.
/// Distances are Euclidean; equal distances are broken by original index, so
/// the ordering is a deterministic function of the data and the query.
#[derive(Debug, Clone)]
pub struct NeighbourOrder {
    query: Vec<f64>,
    perm: Vec<usize>,
    points: Vec<Vec<f64>>,
}

/// Indices of the reference samples sorted by distance to `x`, ties broken
/// by original index. Shared by the public ordering and the batch kernels so
/// both produce the identical permutation.
pub(crate) fn order_indices(data: &Dataset, x: &[f64]) -> Result<Vec<usize>> {
    if x.len() != data.dim() {
        return Err(Error::invalid(format!(
            "query has {} coordinates, data dimension is {}",
            x.len(),
            data.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("query coordinates must be finite"));
    }
    let n = data.len();
    let mut keyed: Vec<(f64, usize)> = (0..n).map(|i| (dist_sq(data.features(i), x), i)).collect();
    keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Order the reference samples of `data` by distance to `x`.
pub fn neighbour_order(data: &Dataset, x: &[f64]) -> Result<NeighbourOrder> {
    let perm = order_indices(data, x)?;
    Ok(NeighbourOrder {
        query: x.to_vec(),
        perm,
        points: (0..data.len()).map(|i| data.features(i).to_vec()).collect(),
    })
}

impl NeighbourOrder {
    /// Build an ordering directly from its pieces. `perm` must be a
    /// permutation of `0..points.len()`; the distance ordering is taken on
    /// trust, which lets tests pin down arbitrary orderings.
    pub fn from_parts(query: Vec<f64>, perm: Vec<usize>, points: Vec<Vec<f64>>) -> Result<Self> {
        if perm.len() != points.len() {
            return Err(Error::invalid(format!(
                "permutation length {} does not match {} points",
                perm.len(),
                points.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &i in &perm {
            if i >= perm.len() || seen[i] {
                return Err(Error::invalid("perm is not a permutation"));
            }
            seen[i] = true;
        }
        let d = query.len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::invalid("point dimensions do not match the query"));
        }
        Ok(NeighbourOrder {
            query,
            perm,
            points,
        })
    }

    /// Number of reference points.
    #[must_use]
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    #[must_use]
    pub fn query(&self) -> &[f64] {
        &self.query
    }

    /// Original index of the `j`-th nearest point.
    #[must_use]
    pub fn original_index(&self, j: usize) -> usize {
        self.perm[j]
    }

    /// Coordinates of the `j`-th nearest point.
    #[must_use]
    pub fn point_along(&self, j: usize) -> &[f64] {
        &self.points[self.perm[j]]
    }

    /// Gather per-point values (given in original index order) into neighbour
    /// order.
    pub fn labels_along(&self, labels: &[u8]) -> Result<Vec<u8>> {
        if labels.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} points",
                labels.len(),
                self.len()
            )));
        }
        Ok(self.perm.iter().map(|&i| labels[i]).collect())
    }
}

fn check_margin_args(order: &NeighbourOrder, labels: &[u8], k: usize) -> Result<()> {
    if labels.len() != order.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} points",
            labels.len(),
            order.len()
        )));
    }
    if k == 0 || k > order.len() {
        return Err(Error::invalid(format!(
            "neighbourhood size {k} is outside 1..={}",
            order.len()
        )));
    }
    Ok(())
}

/// Calibrated source margin: the average of `label - h(point)` over the `k`
/// nearest reference points, accumulated in neighbour order.
///
/// `labels` are given in original index order, matching the dataset the
/// ordering was built from.
pub fn source_margin(
    order: &NeighbourOrder,
    labels: &[u8],
    h: &DecisionTreeFunction,
    k: usize,
) -> Result<f64> {
    check_margin_args(order, labels, k)?;
    if h.dim() != order.query().len() {
        return Err(Error::invalid(format!(
            "tree dimension {} does not match query dimension {}",
            h.dim(),
            order.query().len()
        )));
    }
    let mut acc = 0.0;
    for j in 0..k {
        let i = order.original_index(j);
        acc += f64::from(labels[i]) - h.eval(order.point_along(j))?;
    }
    Ok(acc / k as f64)
}

/// Target margin: the average of `label - 1/2` over the `k` nearest
/// reference points.
pub fn target_margin(order: &NeighbourOrder, labels: &[u8], k: usize) -> Result<f64> {
    check_margin_args(order, labels, k)?;
    let mut acc = 0.0;
    for j in 0..k {
        acc += f64::from(labels[order.original_index(j)]) - 0.5;
    }
    Ok(acc / k as f64)
}

/// Adaptive neighbourhood size for the calibrated source margin.
///
/// Returns one more than the largest `k <= n - 1` such that
/// `|margin_r| * sqrt(r) <= sigma` for every `r` in `1..=k`; if even `r = 1`
/// fails, the result is 1. The result always lies in `1..=n`.
pub fn lepski_k_source(
    order: &NeighbourOrder,
    labels: &[u8],
    h: &DecisionTreeFunction,
    sigma: f64,
) -> Result<usize> {
    if order.is_empty() {
        return Err(Error::invalid("cannot choose a neighbourhood size on empty data"));
    }
    check_margin_args(order, labels, 1)?;
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("robustness value must be positive, got {sigma}")));
    }
    let mut acc = 0.0;
    let mut passed = 0usize;
    for r in 1..order.len() {
        let i = order.original_index(r - 1);
        acc += f64::from(labels[i]) - h.eval(order.point_along(r - 1))?;
        let margin = acc / r as f64;
        if margin.abs() * (r as f64).sqrt() > sigma {
            break;
        }
        passed = r;
    }
    Ok(passed + 1)
}

/// Adaptive neighbourhood size for the target margin, using the envelope
/// rule of [`lepski_k_source`] with the constant 1/2 as calibration.
pub fn lepski_k_target(order: &NeighbourOrder, labels: &[u8], sigma: f64) -> Result<usize> {
    if order.is_empty() {
        return Err(Error::invalid("cannot choose a neighbourhood size on empty data"));
    }
    check_margin_args(order, labels, 1)?;
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("robustness value must be positive, got {sigma}")));
    }
    let mut acc = 0.0;
    let mut passed = 0usize;
    for r in 1..order.len() {
        acc += f64::from(labels[order.original_index(r - 1)]) - 0.5;
        let margin = acc / r as f64;
        if margin.abs() * (r as f64).sqrt() > sigma {
            break;
        }
        passed = r;
    }
    Ok(passed + 1)
}

/// An ascending grid of robustness values for the envelope rule.
///
/// All values lie on the lattice `{j/n : j = 1..n^2}` associated with a
/// reference sample of size `n`, so every classifier built from the grid
/// belongs to the family indexed by that lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessGrid(Vec<f64>);

impl RobustnessGrid {
    /// The full lattice `{j/n : j = 1..n^2}`. Quadratic in `n`; intended for
    /// small reference samples and exactness checks.
    pub fn exact(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("grid needs a positive sample size"));
        }
        let nf = n as f64;
        Ok(RobustnessGrid(
            (1..=n * n).map(|j| j as f64 / nf).collect(),
        ))
    }

    /// A geometric subsample of the lattice spanning `[1/n, n]`, snapped to
    /// multiples of `1/n` and deduplicated. The endpoints are always kept.
    ///
    /// Values at or above `sqrt(n - 1)` all accept every neighbourhood-size
    /// prefix (margins are averages of values in `[-1, 1]`, so the envelope
    /// test `|margin| * sqrt(r) <= sigma` cannot fail there) and therefore
    /// induce one shared classifier; the span still runs to `n` so the grid
    /// is a plain subsample of the full lattice.
    pub fn geometric(n: usize, points: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("grid needs a positive sample size"));
        }
        if points == 0 {
            return Err(Error::invalid("grid needs at least one point"));
        }
        let nf = n as f64;
        let mut values = Vec::with_capacity(points);
        if points == 1 {
            values.push(1.0);
        } else {
            let ratio = (nf * nf).ln();
            for i in 0..points {
                let raw = (1.0 / nf) * (ratio * i as f64 / (points - 1) as f64).exp();
                let snapped = ((raw * nf).round()).max(1.0) / nf;
                values.push(snapped.min(nf));
            }
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(RobustnessGrid(values))
    }

    /// An explicit grid. Values must be positive and finite; they are sorted
    /// and deduplicated but not snapped to any lattice.
    pub fn explicit(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("grid must be nonempty"));
        }
        if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("grid values must be positive and finite"));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(RobustnessGrid(values))
    }

    #[must_use]
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How to build the robustness grid once the reference sample size is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SigmaGridSpec {
    /// Geometric subsample with a fixed number of points.
    Geometric { points: usize },
    /// The full lattice; use only for small samples.
    Exact,
    /// A fixed list of values, independent of the sample size.
    Explicit { values: Vec<f64> },
}

impl Default for SigmaGridSpec {
    fn default() -> Self {
        SigmaGridSpec::Geometric { points: 32 }
    }
}

impl SigmaGridSpec {
    /// Materialise the grid for a reference sample of size `n`.
    pub fn resolve(&self, n: usize) -> Result<RobustnessGrid> {
        match self {
            SigmaGridSpec::Geometric { points } => RobustnessGrid::geometric(n, *points),
            SigmaGridSpec::Exact => RobustnessGrid::exact(n),
            SigmaGridSpec::Explicit { values } => RobustnessGrid::explicit(values.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LabeledSample, Origin};

    fn dataset(coords: &[&[f64]], labels: &[u8], d: usize) -> Dataset {
        let samples = coords
            .iter()
            .zip(labels)
            .map(|(x, &y)| LabeledSample::new(x.to_vec(), y).unwrap())
            .collect();
        Dataset::new(samples, Origin::SourceP, d).unwrap()
    }

    fn order_1d(coords: &[f64], query: f64) -> NeighbourOrder {
        let labels = vec![0u8; coords.len()];
        let refs: Vec<&[f64]> = Vec::new();
        let _ = refs;
        let pts: Vec<Vec<f64>> = coords.iter().map(|&c| vec![c]).collect();
        let pt_refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let data = dataset(&pt_refs, &labels, 1);
        neighbour_order(&data, &[query]).unwrap()
    }

    #[test]
    fn ordering_sorts_by_distance() {
        let data = dataset(&[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]], &[0, 0, 0], 2);
        let order = neighbour_order(&data, &[0.9, 0.0]).unwrap();
        let got: Vec<usize> = (0..3).map(|j| order.original_index(j)).collect();
        assert_eq!(got, vec![1, 0, 2]);
        assert_eq!(order.point_along(0), &[1.0, 0.0]);
    }

    #[test]
    fn ordering_breaks_ties_by_original_index() {
        // Both points are at distance 1 from the query.
        let order = order_1d(&[0.0, 2.0], 1.0);
        assert_eq!(order.original_index(0), 0);
        assert_eq!(order.original_index(1), 1);
    }

    #[test]
    fn labels_gather_through_the_permutation() {
        let data = dataset(&[&[0.0], &[1.0], &[2.0]], &[1, 0, 1], 1);
        let order = neighbour_order(&data, &[2.1]).unwrap();
        assert_eq!(order.labels_along(&[1, 0, 1]).unwrap(), vec![1, 0, 1]);
        let other = neighbour_order(&data, &[-0.1]).unwrap();
        assert_eq!(other.labels_along(&[1, 0, 1]).unwrap(), vec![1, 0, 1]);
        let mid = neighbour_order(&data, &[0.9]).unwrap();
        assert_eq!(mid.labels_along(&[1, 0, 1]).unwrap(), vec![0, 1, 1]);
    }

    #[test]
    fn source_margin_with_constant_half_tree() {
        // Labels along the order are 1, 0, 1; calibration is 1/2 everywhere.
        let data = dataset(&[&[0.0], &[1.0], &[2.0]], &[1, 0, 1], 1);
        let order = neighbour_order(&data, &[-0.5]).unwrap();
        let h = DecisionTreeFunction::constant_half(1);
        let m = source_margin(&order, &data.labels(), &h, 3).unwrap();
        assert!((m - 1.0 / 6.0).abs() < 1e-15);
        let m1 = source_margin(&order, &data.labels(), &h, 1).unwrap();
        assert!((m1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn source_margin_uses_tree_values_at_neighbours() {
        use crate::model::{DecisionTreePartition, SplitStep};
        // Calibration 1.0 for x >= 1.5, 0.0 below it.
        let p = DecisionTreePartition::new(
            1,
            vec![SplitStep {
                leaf: 0,
                axis: 0,
                threshold: 1.5,
            }],
        )
        .unwrap();
        let h = DecisionTreeFunction::new(p, vec![1.0, 0.0], None).unwrap();
        let data = dataset(&[&[0.0], &[1.0], &[2.0]], &[1, 0, 1], 1);
        let order = neighbour_order(&data, &[-0.5]).unwrap();
        // Terms: (1 - 0) + (0 - 0) + (1 - 1) = 1, averaged over 3.
        let m = source_margin(&order, &data.labels(), &h, 3).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn target_margin_matches_hand_values() {
        let data = dataset(&[&[0.0], &[1.0], &[2.0]], &[1, 0, 1], 1);
        let order = neighbour_order(&data, &[-0.5]).unwrap();
        let labels = data.labels();
        assert!((target_margin(&order, &labels, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!(target_margin(&order, &labels, 2).unwrap().abs() < 1e-15);
        assert!((target_margin(&order, &labels, 3).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn margin_rejects_bad_k() {
        let data = dataset(&[&[0.0]], &[1], 1);
        let order = neighbour_order(&data, &[0.0]).unwrap();
        assert!(target_margin(&order, &data.labels(), 0).is_err());
        assert!(target_margin(&order, &data.labels(), 2).is_err());
    }

    #[test]
    fn adaptive_k_all_ones_sigma_one() {
        // Constant margin 1/2: the envelope holds while sqrt(r)/2 <= 1,
        // i.e. r <= 4, so the rule returns 5.
        let coords: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = coords.iter().map(Vec::as_slice).collect();
        let data = dataset(&refs, &[1; 10], 1);
        let order = neighbour_order(&data, &[0.0]).unwrap();
        let h = DecisionTreeFunction::constant_half(1);
        assert_eq!(lepski_k_source(&order, &data.labels(), &h, 1.0).unwrap(), 5);
        assert_eq!(lepski_k_target(&order, &data.labels(), 1.0).unwrap(), 5);
    }

    #[test]
    fn adaptive_k_saturates_at_n_for_large_sigma() {
        let coords: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = coords.iter().map(Vec::as_slice).collect();
        let data = dataset(&refs, &[1; 10], 1);
        let order = neighbour_order(&data, &[0.0]).unwrap();
        // sigma = n dominates every envelope value, so the prefix runs to
        // n - 1 and the rule returns n.
        assert_eq!(lepski_k_target(&order, &data.labels(), 10.0).unwrap(), 10);
    }

    #[test]
    fn adaptive_k_empty_prefix_gives_one() {
        let coords: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = coords.iter().map(Vec::as_slice).collect();
        let data = dataset(&refs, &[1; 6], 1);
        let order = neighbour_order(&data, &[0.0]).unwrap();
        // Margin 1/2 at r = 1 already exceeds sigma = 0.4.
        assert_eq!(lepski_k_target(&order, &data.labels(), 0.4).unwrap(), 1);
    }

    #[test]
    fn adaptive_k_alternating_labels() {
        // Labels along the order alternate 1, 0, 1, ...; prefix margins are
        // 1/(2r) for odd r and 0 for even r, so the scaled margin peaks at
        // 1/2 and the whole prefix passes sigma = 0.6: the rule returns 9.
        let coords: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = coords.iter().map(Vec::as_slice).collect();
        let labels: Vec<u8> = (0..9).map(|i| u8::from(i % 2 == 0)).collect();
        let data = dataset(&refs, &labels, 1);
        let order = neighbour_order(&data, &[0.0]).unwrap();
        assert_eq!(lepski_k_target(&order, &labels, 0.6).unwrap(), 9);
    }

    #[test]
    fn adaptive_k_constant_zero_labels_stops_early() {
        // Margin is -1/2 at every r; scaled margin sqrt(r)/2 passes r = 1
        // (0.5 <= 0.6) and fails r = 2 (~0.707), so the rule returns 2.
        let coords: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = coords.iter().map(Vec::as_slice).collect();
        let data = dataset(&refs, &[0; 9], 1);
        let order = neighbour_order(&data, &[0.0]).unwrap();
        assert_eq!(lepski_k_target(&order, &data.labels(), 0.6).unwrap(), 2);
    }

    #[test]
    fn adaptive_k_monotone_in_sigma() {
        let coords: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin()]).collect();
        let refs: Vec<&[f64]> = coords.iter().map(Vec::as_slice).collect();
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i % 3 == 0)).collect();
        let data = dataset(&refs, &labels, 1);
        let order = neighbour_order(&data, &[0.2]).unwrap();
        let mut prev = 0usize;
        for j in 1..=40 {
            let sigma = j as f64 / 20.0 * 10.0;
            let k = lepski_k_target(&order, &labels, sigma).unwrap();
            assert!(k >= prev);
            assert!((1..=20).contains(&k));
            prev = k;
        }
    }

    #[test]
    fn exact_grid_is_the_full_lattice() {
        let g = RobustnessGrid::exact(3).unwrap();
        assert_eq!(g.len(), 9);
        assert!((g.values()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.values()[8] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn geometric_grid_spans_the_lattice_range() {
        let g = RobustnessGrid::geometric(100, 32).unwrap();
        let v = g.values();
        assert!((v[0] - 0.01).abs() < 1e-12);
        assert!((v[v.len() - 1] - 100.0).abs() < 1e-9);
        for w in v.windows(2) {
            assert!(w[0] < w[1]);
        }
        // Every value sits on the 1/n lattice.
        for &s in v {
            let j = (s * 100.0).round();
            assert!((s - j / 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_spec_resolution() {
        let spec = SigmaGridSpec::default();
        assert_eq!(spec, SigmaGridSpec::Geometric { points: 32 });
        assert!(spec.resolve(50).is_ok());
        assert!(spec.resolve(0).is_err());
        let explicit = SigmaGridSpec::Explicit {
            values: vec![2.0, 1.0, 2.0],
        };
        let g = explicit.resolve(10).unwrap();
        assert_eq!(g.values(), &[1.0, 2.0]);
    }
}
