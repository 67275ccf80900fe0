//! Shared domain types: labeled datasets, decision-tree partitions and
//! functions, classifier handles, and the assumption parameter vector.
//!
//! Everything here is immutable after construction and safe to share across
//! worker threads. Sample order inside a [`Dataset`] is semantically
//! significant: it drives nearest-neighbour tie-breaking and the prefix/suffix
//! split of the target sample, so no operation reorders samples.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which distribution a dataset was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// Source distribution P.
    SourceP,
    /// Target distribution Q.
    TargetQ,
}

impl Origin {
    /// Short code used in manifests and CLI arguments.
    #[must_use]
    pub fn code(self) -> &'static str {
        match self {
            Origin::SourceP => "P",
            Origin::TargetQ => "Q",
        }
    }

    pub fn from_code(code: &str) -> Result<Self> {
        match code {
            "P" | "p" => Ok(Origin::SourceP),
            "Q" | "q" => Ok(Origin::TargetQ),
            other => Err(Error::invalid(format!(
                "unknown origin code {other:?}; expected \"P\" or \"Q\""
            ))),
        }
    }
}

/// A single feature vector with its binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: u8,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::invalid(format!("label must be 0 or 1, got {label}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        Ok(LabeledSample { features, label })
    }
}

/// An ordered labeled sample with an origin tag.
///
/// Index `i` identifies a sample for its whole lifetime; prefix slices of a
/// dataset therefore denote the first draws of the underlying stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    origin: Origin,
    d: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, origin: Origin, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != d {
                return Err(Error::invalid(format!(
                    "sample {i} has {} coordinates, dataset dimension is {d}",
                    s.features.len()
                )));
            }
            if s.label > 1 {
                return Err(Error::invalid(format!("sample {i} has label {}", s.label)));
            }
        }
        Ok(Dataset { samples, origin, d })
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[must_use]
    pub fn origin(&self) -> Origin {
        self.origin
    }

    #[must_use]
    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    #[must_use]
    pub fn features(&self, i: usize) -> &[f64] {
        &self.samples[i].features
    }

    #[must_use]
    pub fn label(&self, i: usize) -> u8 {
        self.samples[i].label
    }

    /// Labels in original index order.
    #[must_use]
    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// The first `n` samples as a new dataset. `n` may not exceed the length.
    pub fn prefix(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::invalid(format!(
                "prefix length {n} exceeds dataset size {}",
                self.len()
            )));
        }
        Ok(Dataset {
            samples: self.samples[..n].to_vec(),
            origin: self.origin,
            d: self.d,
        })
    }

    /// Samples from index `from` to the end, as a new dataset.
    pub fn suffix(&self, from: usize) -> Result<Dataset> {
        if from > self.len() {
            return Err(Error::invalid(format!(
                "suffix start {from} exceeds dataset size {}",
                self.len()
            )));
        }
        Ok(Dataset {
            samples: self.samples[from..].to_vec(),
            origin: self.origin,
            d: self.d,
        })
    }

    /// A copy of the dataset carrying a different origin tag.
    #[must_use]
    pub fn with_origin(&self, origin: Origin) -> Dataset {
        Dataset {
            samples: self.samples.clone(),
            origin,
            d: self.d,
        }
    }

    /// Concatenate two datasets of equal dimension; `self` comes first and
    /// the result carries `origin`.
    pub fn concat(&self, other: &Dataset, origin: Origin) -> Result<Dataset> {
        if self.d != other.d {
            return Err(Error::invalid(format!(
                "cannot concatenate dimensions {} and {}",
                self.d, other.d
            )));
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Ok(Dataset {
            samples,
            origin,
            d: self.d,
        })
    }

    /// Write the dataset as CSV (`x1,...,xd,label`) plus a JSON sidecar
    /// manifest recording origin, dimension and size.
    ///
    /// Coordinates are printed with the shortest representation that parses
    /// back to the identical float, so a write/read round trip is exact.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.d).map(|j| format!("x{j}")).collect();
        header.push("label".to_string());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut record: Vec<String> = s.features.iter().map(|v| format!("{v}")).collect();
            record.push(format!("{}", s.label));
            w.write_record(&record)?;
        }
        w.flush()?;
        let manifest = DatasetManifest {
            origin: self.origin.code().to_string(),
            d: self.d,
            n: self.len(),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(manifest_path(path), json + "\n")?;
        Ok(())
    }

    /// Read a dataset written by [`Dataset::write_csv`], validating the CSV
    /// contents against the sidecar manifest.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let manifest_file = manifest_path(path);
        let manifest: DatasetManifest = serde_json::from_str(
            &std::fs::read_to_string(&manifest_file).map_err(|e| {
                Error::runtime(format!(
                    "cannot read manifest {}: {e}",
                    manifest_file.display()
                ))
            })?,
        )?;
        let origin = Origin::from_code(&manifest.origin)?;
        let mut reader = csv::Reader::from_path(path)?;
        let mut samples = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != manifest.d + 1 {
                return Err(Error::invalid(format!(
                    "CSV row has {} fields, expected {}",
                    record.len(),
                    manifest.d + 1
                )));
            }
            let mut features = Vec::with_capacity(manifest.d);
            for j in 0..manifest.d {
                let v: f64 = record[j]
                    .parse()
                    .map_err(|e| Error::invalid(format!("bad coordinate {:?}: {e}", &record[j])))?;
                features.push(v);
            }
            let label: u8 = record[manifest.d]
                .parse()
                .map_err(|e| Error::invalid(format!("bad label {:?}: {e}", &record[manifest.d])))?;
            samples.push(LabeledSample::new(features, label)?);
        }
        if samples.len() != manifest.n {
            return Err(Error::invalid(format!(
                "CSV has {} rows, manifest declares {}",
                samples.len(),
                manifest.n
            )));
        }
        Dataset::new(samples, origin, manifest.d)
    }
}

/// Sidecar metadata stored next to a dataset CSV.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub origin: String,
    pub d: usize,
    pub n: usize,
}

/// Manifest file path for a dataset CSV: the extension is replaced by
/// `manifest.json` (`data.csv` pairs with `data.manifest.json`).
#[must_use]
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

/// One refinement step of a decision-tree partition: cell `leaf` is replaced
/// by its intersection with the half-space `{x : x[axis] >= threshold}` and
/// the complement is appended as a new cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitStep {
    pub leaf: usize,
    pub axis: usize,
    pub threshold: f64,
}

/// An axis-aligned recursive partition of d-dimensional space.
///
/// Cells are numbered canonically: the initial partition is the single cell 0;
/// applying a step to cell `leaf` keeps the intersected part at index `leaf`
/// and appends the complement as the new last cell. A partition with `k`
/// steps therefore has `k + 1` cells, numbered `0..=k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTreePartition {
    d: usize,
    steps: Vec<SplitStep>,
}

impl DecisionTreePartition {
    pub fn new(d: usize, steps: Vec<SplitStep>) -> Result<Self> {
        let partition = DecisionTreePartition { d, steps };
        partition.validate()?;
        Ok(partition)
    }

    /// Recheck the structural invariants, e.g. after deserialising.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        for (t, step) in self.steps.iter().enumerate() {
            let cells_so_far = t + 1;
            if step.leaf >= cells_so_far {
                return Err(Error::invalid(format!(
                    "step {t} splits cell {} but only {cells_so_far} cells exist",
                    step.leaf
                )));
            }
            if step.axis >= self.d {
                return Err(Error::invalid(format!(
                    "step {t} splits along axis {} in dimension {}",
                    step.axis, self.d
                )));
            }
            if !step.threshold.is_finite() {
                return Err(Error::invalid(format!("step {t} has a non-finite threshold")));
            }
        }
        Ok(())
    }

    /// The trivial single-cell partition of d-dimensional space.
    #[must_use]
    pub fn trivial(d: usize) -> Self {
        DecisionTreePartition {
            d,
            steps: Vec::new(),
        }
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[must_use]
    pub fn steps(&self) -> &[SplitStep] {
        &self.steps
    }

    /// Number of cells (`steps + 1`).
    #[must_use]
    pub fn leaf_count(&self) -> usize {
        self.steps.len() + 1
    }

    /// The index of the cell containing `x`, replaying the refinement steps.
    ///
    /// At each step only the currently tracked cell can be affected: if `x`
    /// sits in the split cell it stays there when `x[axis] >= threshold` and
    /// moves to the appended complement otherwise.
    pub fn leaf_of(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.d {
            return Err(Error::invalid(format!(
                "point has {} coordinates, partition dimension is {}",
                x.len(),
                self.d
            )));
        }
        let mut cell = 0usize;
        for (t, step) in self.steps.iter().enumerate() {
            if cell == step.leaf && x[step.axis] < step.threshold {
                cell = t + 1;
            }
        }
        Ok(cell)
    }
}

/// A decision-tree function: a partition together with one calibration value
/// per cell.
///
/// When `grid_n` is set, every value must lie on the grid
/// `{0, 1/grid_n, ..., 1}`; trees produced by the empirical risk minimisation
/// search carry `grid_n` equal to the source sample size, while oracle trees
/// used in tests may hold arbitrary values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTreeFunction {
    pub partition: DecisionTreePartition,
    pub taus: Vec<f64>,
    pub grid_n: Option<usize>,
}

impl DecisionTreeFunction {
    pub fn new(
        partition: DecisionTreePartition,
        taus: Vec<f64>,
        grid_n: Option<usize>,
    ) -> Result<Self> {
        if taus.len() != partition.leaf_count() {
            return Err(Error::invalid(format!(
                "{} calibration values for {} cells",
                taus.len(),
                partition.leaf_count()
            )));
        }
        for (i, &t) in taus.iter().enumerate() {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("value {t} at cell {i} is outside [0, 1]")));
            }
        }
        if let Some(n) = grid_n {
            if n == 0 {
                return Err(Error::invalid("grid_n must be positive"));
            }
            for (i, &t) in taus.iter().enumerate() {
                let snapped = (t * n as f64).round() / n as f64;
                if snapped != t {
                    return Err(Error::invalid(format!(
                        "value {t} at cell {i} is not on the 1/{n} grid"
                    )));
                }
            }
        }
        Ok(DecisionTreeFunction {
            partition,
            taus,
            grid_n,
        })
    }

    /// The constant function equal to 1/2 on all of d-dimensional space,
    /// represented as the trivial partition with a single value.
    #[must_use]
    pub fn constant_half(d: usize) -> Self {
        DecisionTreeFunction {
            partition: DecisionTreePartition::trivial(d),
            taus: vec![0.5],
            grid_n: None,
        }
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.partition.dim()
    }

    /// The calibration value of the cell containing `x`.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.taus[self.partition.leaf_of(x)?])
    }
}

/// An evaluable classifier.
///
/// The three variants cover the classifiers the pipeline can produce: a
/// source-margin classifier calibrated by a decision tree, a plain adaptive
/// nearest-neighbour classifier on target data, and a constant. Reference
/// data is shared behind an [`Arc`] so a family of classifiers over many
/// robustness values does not copy its sample.
#[derive(Debug, Clone)]
pub enum ClassifierHandle {
    /// Predicts 1 when the calibrated source margin at the adaptively chosen
    /// neighbourhood size is nonnegative.
    SourceCalibrated {
        sigma: f64,
        tree: DecisionTreeFunction,
        ref_data: Arc<Dataset>,
    },
    /// Predicts 1 when the target nearest-neighbour margin at the adaptively
    /// chosen neighbourhood size is nonnegative.
    TargetKnn { sigma: f64, ref_data: Arc<Dataset> },
    /// Predicts a fixed label.
    Constant { label: u8 },
}

impl ClassifierHandle {
    pub fn source_calibrated(
        sigma: f64,
        tree: DecisionTreeFunction,
        ref_data: Arc<Dataset>,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("robustness value must be positive"));
        }
        if ref_data.is_empty() {
            return Err(Error::invalid("reference data must be nonempty"));
        }
        if tree.dim() != ref_data.dim() {
            return Err(Error::invalid("tree and reference data dimensions differ"));
        }
        Ok(ClassifierHandle::SourceCalibrated {
            sigma,
            tree,
            ref_data,
        })
    }

    pub fn target_knn(sigma: f64, ref_data: Arc<Dataset>) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("robustness value must be positive"));
        }
        if ref_data.is_empty() {
            return Err(Error::invalid("reference data must be nonempty"));
        }
        Ok(ClassifierHandle::TargetKnn { sigma, ref_data })
    }

    pub fn constant(label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::invalid(format!("label must be 0 or 1, got {label}")));
        }
        Ok(ClassifierHandle::Constant { label })
    }

    /// Predict the label of `x`.
    ///
    /// For the margin-based variants this recomputes the neighbour order, the
    /// adaptive neighbourhood size and the margin from their definitions; it
    /// is a deterministic pure function of the handle and the point.
    pub fn classify(&self, x: &[f64]) -> Result<u8> {
        match self {
            ClassifierHandle::Constant { label } => Ok(*label),
            ClassifierHandle::SourceCalibrated {
                sigma,
                tree,
                ref_data,
            } => {
                let order = crate::neighbours::neighbour_order(ref_data, x)?;
                let labels = ref_data.labels();
                let k = crate::neighbours::lepski_k_source(&order, &labels, tree, *sigma)?;
                let m = crate::neighbours::source_margin(&order, &labels, tree, k)?;
                Ok(u8::from(m >= 0.0))
            }
            ClassifierHandle::TargetKnn { sigma, ref_data } => {
                let order = crate::neighbours::neighbour_order(ref_data, x)?;
                let labels = ref_data.labels();
                let k = crate::neighbours::lepski_k_target(&order, &labels, *sigma)?;
                let m = crate::neighbours::target_margin(&order, &labels, k)?;
                Ok(u8::from(m >= 0.0))
            }
        }
    }
}

/// The full parameter vector of the structural assumptions: transfer
/// (`delta`, `phi`, `l_star`), marginal tails (`d_q`, `gamma_q`, `d_p`,
/// `gamma_p`, `c_pq`), margin (`alpha`, `c_m`) and smoothness (`beta`, `c_s`),
/// plus the ambient dimension `d` the intrinsic dimensions live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub delta: f64,
    pub phi: f64,
    pub l_star: u64,
    pub d: u64,
    pub d_q: f64,
    pub gamma_q: f64,
    pub d_p: f64,
    pub gamma_p: f64,
    pub c_pq: f64,
    pub alpha: f64,
    pub c_m: f64,
    pub beta: f64,
    pub c_s: f64,
}

impl ParameterVector {
    /// Check all range constraints. Call after deserialization; the
    /// constructors in this crate always return validated vectors.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid(msg));
        if !(0.0..1.0).contains(&self.delta) {
            return fail(format!("delta must be in [0, 1), got {}", self.delta));
        }
        if !(self.phi > 0.0 && self.phi <= 1.0) {
            return fail(format!("phi must be in (0, 1], got {}", self.phi));
        }
        if self.l_star == 0 {
            return fail("l_star must be at least 1".into());
        }
        if self.d == 0 {
            return fail("d must be at least 1".into());
        }
        let d = self.d as f64;
        if !(1.0 <= self.d_q && self.d_q <= d) {
            return fail(format!("d_q must be in [1, d] = [1, {d}], got {}", self.d_q));
        }
        if !(self.d_q <= self.d_p && self.d_p <= d) {
            return fail(format!(
                "d_p must be in [d_q, d] = [{}, {d}], got {}",
                self.d_q, self.d_p
            ));
        }
        if !(self.gamma_q > 0.0) {
            return fail(format!("gamma_q must be positive, got {}", self.gamma_q));
        }
        if !(self.gamma_p > 0.0) {
            return fail(format!("gamma_p must be positive, got {}", self.gamma_p));
        }
        if !(self.c_pq > 1.0) {
            return fail(format!("c_pq must exceed 1, got {}", self.c_pq));
        }
        if !(self.alpha > 0.0) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.c_m >= 1.0) {
            return fail(format!("c_m must be at least 1, got {}", self.c_m));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return fail(format!("beta must be in (0, 1], got {}", self.beta));
        }
        if !(self.c_s >= 1.0) {
            return fail(format!("c_s must be at least 1, got {}", self.c_s));
        }
        Ok(())
    }
}

/// Squared Euclidean distance. Ordering by squared distance is the exact
/// Euclidean ordering and avoids the square root.
#[must_use]
pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}
