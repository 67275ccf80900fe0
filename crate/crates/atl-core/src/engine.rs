//! Batch computation kernels for fitting and prediction.
//!
//! The operations in `neighbours` and `tree_search` define the semantics;
//! this module computes the same quantities with the per-query work shared
//! across candidate trees and robustness values. The key observation is that
//! one pass over a query's neighbour order yields the margin at every
//! neighbourhood size together with the running maximum of the scaled
//! margins, after which the adaptive size for any robustness value is a
//! binary search. All arithmetic follows the exact operation order of the
//! public functions, so results are bit-identical, which the unit tests
//! assert directly.

use crate::model::{Dataset, DecisionTreeFunction};
use crate::neighbours::order_indices;
use crate::tree_search::argmin_first;
use crate::Result;

/// Margins and envelope maxima of one walk along a neighbour order.
struct WalkBuffers {
    /// `margins[r - 1]` is the margin at neighbourhood size `r`, `r = 1..=n`.
    margins: Vec<f64>,
    /// `envelope_max[r - 1]` is the running maximum of
    /// `|margin| * sqrt(r)` over `1..=r`, for `r = 1..=n-1`.
    envelope_max: Vec<f64>,
}

impl WalkBuffers {
    fn new(n: usize) -> Self {
        WalkBuffers {
            margins: vec![0.0; n],
            envelope_max: vec![0.0; n.saturating_sub(1)],
        }
    }

    /// Accumulate `labels_along[j] - taus[leaf_along[j]]` in neighbour order,
    /// mirroring the accumulation in the adaptive-size rule and the margins.
    fn walk_source(&mut self, labels_along: &[f64], leaf_along: &[u32], taus: &[f64], sqrt_r: &[f64]) {
        let n = labels_along.len();
        let mut acc = 0.0;
        let mut running = 0.0;
        for j in 0..n {
            acc += labels_along[j] - taus[leaf_along[j] as usize];
            let margin = acc / (j + 1) as f64;
            self.margins[j] = margin;
            if j + 1 < n {
                let g = margin.abs() * sqrt_r[j];
                if g > running {
                    running = g;
                }
                self.envelope_max[j] = running;
            }
        }
    }

    /// Accumulate `labels_along[j] - 0.5`, mirroring the target-side rule.
    fn walk_target(&mut self, labels_along: &[f64], sqrt_r: &[f64]) {
        let n = labels_along.len();
        let mut acc = 0.0;
        let mut running = 0.0;
        for j in 0..n {
            acc += labels_along[j] - 0.5;
            let margin = acc / (j + 1) as f64;
            self.margins[j] = margin;
            if j + 1 < n {
                let g = margin.abs() * sqrt_r[j];
                if g > running {
                    running = g;
                }
                self.envelope_max[j] = running;
            }
        }
    }

    /// Prediction at the adaptive neighbourhood size for one robustness
    /// value: the longest prefix with envelope maximum within `sigma`, plus
    /// one, then the sign of the margin there.
    fn predict(&self, sigma: f64) -> u8 {
        let k = self.envelope_max.partition_point(|&g| g <= sigma) + 1;
        u8::from(self.margins[k - 1] >= 0.0)
    }
}

fn sqrt_table(n: usize) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).sqrt()).collect()
}

/// Labels of `data` gathered along `perm`, as floats.
fn labels_along(data: &Dataset, perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&i| f64::from(data.label(i))).collect()
}

/// Runs of consecutive candidates sharing a partition. Enumeration emits
/// trees grouped by partition, so runs recover the grouping without hashing.
fn partition_runs(candidates: &[DecisionTreeFunction]) -> Vec<std::ops::Range<usize>> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=candidates.len() {
        if i == candidates.len() || candidates[i].partition != candidates[start].partition {
            runs.push(start..i);
            start = i;
        }
    }
    runs
}

/// Cell index of every reference point, in original index order.
fn leaf_table(partition: &crate::model::DecisionTreePartition, data: &Dataset) -> Result<Vec<u32>> {
    (0..data.len())
        .map(|i| partition.leaf_of(data.features(i)).map(|c| c as u32))
        .collect()
}

/// For every robustness value, the index of the candidate tree with the
/// fewest calibration errors (ties to the lowest index).
///
/// Matches running the definitional per-candidate selection once per value.
pub(crate) fn select_trees_for_all_sigmas(
    candidates: &[DecisionTreeFunction],
    sigmas: &[f64],
    source: &Dataset,
    calib: &Dataset,
) -> Result<Vec<usize>> {
    let n = source.len();
    let s = sigmas.len();
    let sqrt_r = sqrt_table(n);
    let runs = partition_runs(candidates);
    let leaf_tables: Vec<Vec<u32>> = runs
        .iter()
        .map(|run| leaf_table(&candidates[run.start].partition, source))
        .collect::<Result<_>>()?;

    let mut counts = vec![0u32; candidates.len() * s];
    let mut buf = WalkBuffers::new(n);
    let mut leaf_along = vec![0u32; n];
    for i in 0..calib.len() {
        let perm = order_indices(source, calib.features(i))?;
        let y_along = labels_along(source, &perm);
        let y = calib.label(i);
        for (run, table) in runs.iter().zip(&leaf_tables) {
            for (j, &p) in perm.iter().enumerate() {
                leaf_along[j] = table[p];
            }
            for c in run.clone() {
                buf.walk_source(&y_along, &leaf_along, &candidates[c].taus, &sqrt_r);
                for (si, &sigma) in sigmas.iter().enumerate() {
                    let pred = buf.predict(sigma);
                    counts[c * s + si] += u32::from(pred != y);
                }
            }
        }
    }

    let mut winners = Vec::with_capacity(s);
    for si in 0..s {
        let column: Vec<usize> = (0..candidates.len())
            .map(|c| counts[c * s + si] as usize)
            .collect();
        winners.push(argmin_first(&column));
    }
    Ok(winners)
}

/// Predictions of source-calibrated family members on a query list.
///
/// `members` pairs an index into `trees` (a registry of distinct selected
/// trees) with a robustness value; the result holds one prediction row per
/// member, in member order.
pub(crate) fn predict_source_family(
    trees: &[DecisionTreeFunction],
    members: &[(usize, f64)],
    source: &Dataset,
    queries: &[Vec<f64>],
) -> Result<Vec<Vec<u8>>> {
    let n = source.len();
    let sqrt_r = sqrt_table(n);
    let leaf_tables: Vec<Vec<u32>> = trees
        .iter()
        .map(|t| leaf_table(&t.partition, source))
        .collect::<Result<_>>()?;
    let mut preds = vec![vec![0u8; queries.len()]; members.len()];
    let mut buf = WalkBuffers::new(n);
    let mut leaf_along = vec![0u32; n];
    for (qi, q) in queries.iter().enumerate() {
        let perm = order_indices(source, q)?;
        let y_along = labels_along(source, &perm);
        for (ti, tree) in trees.iter().enumerate() {
            let table = &leaf_tables[ti];
            for (j, &p) in perm.iter().enumerate() {
                leaf_along[j] = table[p];
            }
            buf.walk_source(&y_along, &leaf_along, &tree.taus, &sqrt_r);
            for (mi, &(member_tree, sigma)) in members.iter().enumerate() {
                if member_tree == ti {
                    preds[mi][qi] = buf.predict(sigma);
                }
            }
        }
    }
    Ok(preds)
}

/// Predictions of target-side adaptive nearest-neighbour classifiers, one
/// row per robustness value.
pub(crate) fn predict_target_family(
    sigmas: &[f64],
    ref_data: &Dataset,
    queries: &[Vec<f64>],
) -> Result<Vec<Vec<u8>>> {
    let n = ref_data.len();
    let sqrt_r = sqrt_table(n);
    let mut preds = vec![vec![0u8; queries.len()]; sigmas.len()];
    let mut buf = WalkBuffers::new(n);
    for (qi, q) in queries.iter().enumerate() {
        let perm = order_indices(ref_data, q)?;
        let y_along = labels_along(ref_data, &perm);
        buf.walk_target(&y_along, &sqrt_r);
        for (si, &sigma) in sigmas.iter().enumerate() {
            preds[si][qi] = buf.predict(sigma);
        }
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierHandle, LabeledSample, Origin};
    use crate::seed::rng_from;
    use crate::tree_search::{
        enumerate_restricted_trees, erm_tree_error_counts, SearchMode, TauMode, TreeSearchStrategy,
    };
    use rand::Rng;
    use std::sync::Arc;

    fn random_dataset(n: usize, d: usize, origin: Origin, seed: u64) -> Dataset {
        let mut rng = rng_from(seed, &[n as u64, d as u64]);
        let samples = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
                let y = u8::from(rng.gen_bool(0.5));
                LabeledSample::new(x, y).unwrap()
            })
            .collect();
        Dataset::new(samples, origin, d).unwrap()
    }

    #[test]
    fn batch_selection_matches_the_definitional_scan() {
        let source = random_dataset(25, 2, Origin::SourceP, 1);
        let calib = random_dataset(12, 2, Origin::TargetQ, 2);
        let points: Vec<Vec<f64>> = (0..source.len())
            .map(|i| source.features(i).to_vec())
            .collect();
        let labels = source.labels();
        let strategy = TreeSearchStrategy {
            mode: SearchMode::MonteCarlo { num_splits: 8 },
            tau_mode: TauMode::LeafMeanPlusLocalGrid {
                radius: 0.3,
                grid_size: 3,
            },
        };
        let candidates =
            enumerate_restricted_trees(&points, Some(&labels), 2, source.len(), &strategy, 5)
                .unwrap();
        assert!(candidates.len() > 4);
        let sigmas = [0.2, 0.5, 1.0, 2.0, 5.0];
        let winners =
            select_trees_for_all_sigmas(&candidates, &sigmas, &source, &calib).unwrap();
        for (si, &sigma) in sigmas.iter().enumerate() {
            let counts = erm_tree_error_counts(&candidates, sigma, &source, &calib).unwrap();
            let best = argmin_first(&counts);
            assert_eq!(winners[si], best, "sigma = {sigma}");
        }
    }

    #[test]
    fn batch_source_predictions_match_classify() {
        let source = Arc::new(random_dataset(30, 2, Origin::SourceP, 7));
        let points: Vec<Vec<f64>> = (0..source.len())
            .map(|i| source.features(i).to_vec())
            .collect();
        let labels = source.labels();
        let strategy = TreeSearchStrategy::default();
        let trees =
            enumerate_restricted_trees(&points, Some(&labels), 2, source.len(), &strategy, 9)
                .unwrap();
        let registry = vec![trees[0].clone(), trees[trees.len() / 2].clone()];
        let members = vec![(0usize, 0.4), (0, 1.3), (1, 0.4), (1, 6.0)];
        let queries: Vec<Vec<f64>> = {
            let q = random_dataset(15, 2, Origin::TargetQ, 8);
            (0..q.len()).map(|i| q.features(i).to_vec()).collect()
        };
        let preds = predict_source_family(&registry, &members, &source, &queries).unwrap();
        for (mi, &(ti, sigma)) in members.iter().enumerate() {
            let handle = ClassifierHandle::source_calibrated(
                sigma,
                registry[ti].clone(),
                source.clone(),
            )
            .unwrap();
            for (qi, q) in queries.iter().enumerate() {
                assert_eq!(preds[mi][qi], handle.classify(q).unwrap());
            }
        }
    }

    #[test]
    fn batch_target_predictions_match_classify() {
        let refs = Arc::new(random_dataset(20, 1, Origin::TargetQ, 13));
        let queries: Vec<Vec<f64>> = {
            let q = random_dataset(10, 1, Origin::TargetQ, 14);
            (0..q.len()).map(|i| q.features(i).to_vec()).collect()
        };
        let sigmas = [0.1, 0.7, 2.0, 20.0];
        let preds = predict_target_family(&sigmas, &refs, &queries).unwrap();
        for (si, &sigma) in sigmas.iter().enumerate() {
            let handle = ClassifierHandle::target_knn(sigma, refs.clone()).unwrap();
            for (qi, q) in queries.iter().enumerate() {
                assert_eq!(preds[si][qi], handle.classify(q).unwrap());
            }
        }
    }

    #[test]
    fn single_point_reference_is_handled() {
        let refs = random_dataset(1, 1, Origin::TargetQ, 21);
        let queries = vec![vec![0.3]];
        let preds = predict_target_family(&[0.5], &refs, &queries).unwrap();
        let handle =
            ClassifierHandle::target_knn(0.5, Arc::new(refs)).unwrap();
        assert_eq!(preds[0][0], handle.classify(&[0.3]).unwrap());
    }
}
