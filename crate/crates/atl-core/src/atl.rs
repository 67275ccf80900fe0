//! The end-to-end transfer learning pipeline.
//!
//! Fitting proceeds in two stages. The target sample is split into a
//! calibration half and a holdout half. On the calibration half, a family of
//! candidate classifiers is built: for every robustness value and leaf
//! budget, a decision tree is selected by empirical risk minimisation to
//! calibrate the source nearest-neighbour margin, and for every robustness
//! value a plain adaptive nearest-neighbour classifier on the calibration
//! half itself is added. The final classifier is the family member with the
//! fewest mistakes on the holdout half. With no source data the source side
//! of the family is empty and the procedure reduces to adaptive
//! nearest-neighbour classification on target data.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{predict_source_family, predict_target_family, select_trees_for_all_sigmas};
use crate::model::{
    ClassifierHandle, Dataset, DecisionTreeFunction, DecisionTreePartition, Origin, SplitStep,
};
use crate::neighbours::SigmaGridSpec;
use crate::seed::derive_seed;
use crate::tree_search::{argmin_first, enumerate_restricted_trees, TreeSearchStrategy};
use crate::{Error, Result};

/// Most classifiers a single fit may put up for final selection.
const FAMILY_CAP: usize = 100_000;

/// Configuration of a single fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlConfig {
    /// Robustness grid for the source-calibrated side, resolved at the
    /// source sample size.
    pub sigma_grid_p: SigmaGridSpec,
    /// Robustness grid for the target side, resolved at the calibration
    /// half's size.
    pub sigma_grid_q: SigmaGridSpec,
    /// Leaf budgets; 0 denotes the fixed constant-1/2 calibration function.
    pub l_values: Vec<usize>,
    pub tree_strategy: TreeSearchStrategy,
    pub seed: u64,
}

impl Default for AtlConfig {
    fn default() -> Self {
        AtlConfig {
            sigma_grid_p: SigmaGridSpec::default(),
            sigma_grid_q: SigmaGridSpec::default(),
            l_values: vec![0, 1, 2],
            tree_strategy: TreeSearchStrategy::default(),
            seed: 0,
        }
    }
}

impl AtlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_values.is_empty() {
            return Err(Error::invalid("l_values must be nonempty"));
        }
        self.tree_strategy.validate()
    }
}

/// A fitted model: the selected classifier plus the full family it was
/// selected from and the per-member holdout error counts.
#[derive(Debug, Clone)]
pub struct AtlModel {
    pub chosen: ClassifierHandle,
    /// Index of `chosen` in `family_p` followed by `family_q`.
    pub chosen_index: usize,
    pub family_p: Vec<ClassifierHandle>,
    pub family_q: Vec<ClassifierHandle>,
    /// Size of the calibration half (the first this-many target samples).
    pub split_index: usize,
    /// Holdout error count per family member, in family order.
    pub holdout_errors: Vec<usize>,
}

/// Split a target sample into its calibration half (the first
/// `floor(n/2)` samples) and holdout half (the rest), by original order.
pub fn split_target(d_q: &Dataset) -> Result<(Dataset, Dataset)> {
    if d_q.origin() != Origin::TargetQ {
        return Err(Error::invalid("can only split target-tagged data"));
    }
    if d_q.len() < 2 {
        return Err(Error::invalid(format!(
            "target sample must have at least 2 points, got {}",
            d_q.len()
        )));
    }
    let m = d_q.len() / 2;
    Ok((d_q.prefix(m)?, d_q.suffix(m)?))
}

/// Fit the two-stage adaptive transfer classifier.
pub fn fit_atl(d_p: &Dataset, d_q: &Dataset, cfg: &AtlConfig) -> Result<AtlModel> {
    cfg.validate()?;
    if d_p.origin() != Origin::SourceP {
        return Err(Error::invalid("source data must be tagged as source"));
    }
    if !d_p.is_empty() && d_p.dim() != d_q.dim() {
        return Err(Error::invalid(format!(
            "source dimension {} does not match target dimension {}",
            d_p.dim(),
            d_q.dim()
        )));
    }
    let (d_q0, d_q1) = split_target(d_q)?;
    let split_index = d_q0.len();

    // The target-side robustness lattice is indexed by the full target
    // sample size, even though the margins behind each classifier come from
    // the calibration half only.
    let grid_q = cfg.sigma_grid_q.resolve(d_q.len())?;
    let grid_p = if d_p.is_empty() {
        None
    } else {
        Some(cfg.sigma_grid_p.resolve(d_p.len())?)
    };
    let family_p_size = grid_p.as_ref().map_or(0, |g| g.len() * cfg.l_values.len());
    if family_p_size + grid_q.len() > FAMILY_CAP {
        return Err(Error::invalid(format!(
            "configuration yields {} classifiers, above the cap of {FAMILY_CAP}",
            family_p_size + grid_q.len()
        )));
    }

    // Source side: per leaf budget, select one calibration tree per
    // robustness value on the calibration half; budget 0 always uses the
    // constant-1/2 function.
    let mut family_p: Vec<ClassifierHandle> = Vec::with_capacity(family_p_size);
    let mut registry: Vec<DecisionTreeFunction> = Vec::new();
    let mut members: Vec<(usize, f64)> = Vec::with_capacity(family_p_size);
    if let Some(grid_p) = &grid_p {
        let source_arc = Arc::new(d_p.clone());
        let points: Vec<Vec<f64>> = (0..d_p.len()).map(|i| d_p.features(i).to_vec()).collect();
        let labels = d_p.labels();
        for &l in &cfg.l_values {
            if l == 0 {
                let slot = registry.len();
                registry.push(DecisionTreeFunction::constant_half(d_p.dim()));
                for &sigma in grid_p.values() {
                    members.push((slot, sigma));
                    family_p.push(ClassifierHandle::source_calibrated(
                        sigma,
                        registry[slot].clone(),
                        source_arc.clone(),
                    )?);
                }
            } else {
                let candidates = enumerate_restricted_trees(
                    &points,
                    Some(&labels),
                    l,
                    d_p.len(),
                    &cfg.tree_strategy,
                    derive_seed(cfg.seed, &[1, l as u64]),
                )?;
                let winners =
                    select_trees_for_all_sigmas(&candidates, grid_p.values(), d_p, &d_q0)?;
                let mut slot_of = vec![usize::MAX; candidates.len()];
                for (si, &sigma) in grid_p.values().iter().enumerate() {
                    let w = winners[si];
                    if slot_of[w] == usize::MAX {
                        slot_of[w] = registry.len();
                        registry.push(candidates[w].clone());
                    }
                    members.push((slot_of[w], sigma));
                    family_p.push(ClassifierHandle::source_calibrated(
                        sigma,
                        registry[slot_of[w]].clone(),
                        source_arc.clone(),
                    )?);
                }
            }
        }
    }

    // Target side: one adaptive nearest-neighbour classifier per robustness
    // value, referencing the calibration half.
    let d_q0_arc = Arc::new(d_q0.clone());
    let family_q: Vec<ClassifierHandle> = grid_q
        .values()
        .iter()
        .map(|&sigma| ClassifierHandle::target_knn(sigma, d_q0_arc.clone()))
        .collect::<Result<_>>()?;

    // Final selection on the holdout half.
    let queries: Vec<Vec<f64>> = (0..d_q1.len()).map(|i| d_q1.features(i).to_vec()).collect();
    let preds_p = if members.is_empty() {
        Vec::new()
    } else {
        predict_source_family(&registry, &members, d_p, &queries)?
    };
    let preds_q = predict_target_family(grid_q.values(), &d_q0, &queries)?;

    let mut holdout_errors = Vec::with_capacity(family_p.len() + family_q.len());
    for preds in preds_p.iter().chain(preds_q.iter()) {
        let errs = preds
            .iter()
            .enumerate()
            .filter(|&(i, &p)| p != d_q1.label(i))
            .count();
        holdout_errors.push(errs);
    }
    let chosen_index = argmin_first(&holdout_errors);
    let chosen = if chosen_index < family_p.len() {
        family_p[chosen_index].clone()
    } else {
        family_q[chosen_index - family_p.len()].clone()
    };

    Ok(AtlModel {
        chosen,
        chosen_index,
        family_p,
        family_q,
        split_index,
        holdout_errors,
    })
}

/// Merge the two samples so that every prefix holds source and target points
/// in proportion to their overall sizes, preserving the order within each
/// sample. Deterministic; ties go to the source side.
fn pooled_interleave(d_p: &Dataset, d_q: &Dataset) -> Result<Dataset> {
    if d_p.dim() != d_q.dim() {
        return Err(Error::invalid(format!(
            "cannot pool dimensions {} and {}",
            d_p.dim(),
            d_q.dim()
        )));
    }
    let (n_p, n_q) = (d_p.len(), d_q.len());
    let mut samples = Vec::with_capacity(n_p + n_q);
    let (mut i_p, mut i_q) = (0usize, 0usize);
    while i_p < n_p || i_q < n_q {
        // Take the side whose fraction consumed would stay smaller.
        let take_p = i_p < n_p && (i_q == n_q || (i_p + 1) * n_q <= (i_q + 1) * n_p);
        if take_p {
            samples.push(d_p.samples()[i_p].clone());
            i_p += 1;
        } else {
            samples.push(d_q.samples()[i_q].clone());
            i_q += 1;
        }
    }
    Dataset::new(samples, Origin::TargetQ, d_q.dim())
}

/// The pooled baseline: merge the source sample into the target sample and
/// run the pipeline on the result as pure target data.
///
/// The merge keeps the two samples in proportion throughout, so the
/// calibration half and the holdout half of the downstream fit both see the
/// same source-to-target mix; a plain concatenation would hand the pipeline a
/// calibration half drawn from one sample only.
pub fn fit_pooled(d_p: &Dataset, d_q: &Dataset, cfg: &AtlConfig) -> Result<AtlModel> {
    if d_p.origin() != Origin::SourceP {
        return Err(Error::invalid("source data must be tagged as source"));
    }
    let pooled = if d_p.is_empty() {
        d_q.clone()
    } else {
        pooled_interleave(d_p, d_q)?
    };
    let empty_p = Dataset::new(Vec::new(), Origin::SourceP, pooled.dim())?;
    fit_atl(&empty_p, &pooled, cfg)
}

/// Serialised form of a fitted classifier: enough to re-instantiate its
/// predictions exactly, given the referenced dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree: Option<TreeDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ModelReference>,
}

/// Serialised decision-tree function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeDoc {
    pub d: usize,
    pub steps: Vec<SplitStep>,
    pub taus: Vec<f64>,
    pub grid_n: Option<usize>,
}

/// Pointer to the reference data a classifier carries: a dataset CSV path
/// and how many leading samples of it to take.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReference {
    pub path: String,
    pub take: usize,
    pub origin: String,
}

fn tree_doc(tree: &DecisionTreeFunction) -> TreeDoc {
    TreeDoc {
        d: tree.dim(),
        steps: tree.partition.steps().to_vec(),
        taus: tree.taus.clone(),
        grid_n: tree.grid_n,
    }
}

/// Describe a fitted model's chosen classifier as a JSON document.
///
/// `source_path` and `target_path` are the dataset files the fit was run on,
/// recorded verbatim; a source-calibrated model requires `source_path`.
pub fn model_doc(
    model: &AtlModel,
    source_path: Option<&str>,
    target_path: &str,
) -> Result<ModelDoc> {
    Ok(match &model.chosen {
        ClassifierHandle::Constant { label } => ModelDoc {
            variant: "constant".to_string(),
            sigma: None,
            label: Some(*label),
            tree: None,
            reference: None,
        },
        ClassifierHandle::SourceCalibrated {
            sigma,
            tree,
            ref_data,
        } => ModelDoc {
            variant: "source_calibrated".to_string(),
            sigma: Some(*sigma),
            label: None,
            tree: Some(tree_doc(tree)),
            reference: Some(ModelReference {
                path: source_path
                    .ok_or_else(|| {
                        Error::invalid(
                            "the chosen classifier references source data; a source path is required",
                        )
                    })?
                    .to_string(),
                take: ref_data.len(),
                origin: Origin::SourceP.code().to_string(),
            }),
        },
        ClassifierHandle::TargetKnn { sigma, ref_data } => ModelDoc {
            variant: "target_knn".to_string(),
            sigma: Some(*sigma),
            label: None,
            tree: None,
            reference: Some(ModelReference {
                path: target_path.to_string(),
                take: ref_data.len(),
                origin: Origin::TargetQ.code().to_string(),
            }),
        },
    })
}

/// Write the chosen classifier of a fitted model as JSON.
pub fn export_model(
    model: &AtlModel,
    source_path: Option<&str>,
    target_path: &str,
    out: impl AsRef<Path>,
) -> Result<()> {
    let doc = model_doc(model, source_path, target_path)?;
    let json = serde_json::to_string_pretty(&doc)?;
    std::fs::write(out.as_ref(), json + "\n")?;
    Ok(())
}

/// Re-instantiate a classifier from a model document, loading referenced
/// data relative to `base_dir` when the stored path is relative.
pub fn instantiate_model(doc: &ModelDoc, base_dir: &Path) -> Result<ClassifierHandle> {
    let load_reference = |reference: &ModelReference| -> Result<Arc<Dataset>> {
        let raw = Path::new(&reference.path);
        let path = if raw.is_absolute() {
            raw.to_path_buf()
        } else {
            base_dir.join(raw)
        };
        let data = Dataset::read_csv(&path)?;
        if data.origin().code() != reference.origin {
            return Err(Error::invalid(format!(
                "referenced dataset has origin {}, model expects {}",
                data.origin().code(),
                reference.origin
            )));
        }
        Ok(Arc::new(data.prefix(reference.take)?))
    };
    match doc.variant.as_str() {
        "constant" => {
            let label = doc
                .label
                .ok_or_else(|| Error::invalid("constant model needs a label"))?;
            ClassifierHandle::constant(label)
        }
        "target_knn" => {
            let sigma = doc
                .sigma
                .ok_or_else(|| Error::invalid("model needs a robustness value"))?;
            let reference = doc
                .reference
                .as_ref()
                .ok_or_else(|| Error::invalid("model needs a data reference"))?;
            ClassifierHandle::target_knn(sigma, load_reference(reference)?)
        }
        "source_calibrated" => {
            let sigma = doc
                .sigma
                .ok_or_else(|| Error::invalid("model needs a robustness value"))?;
            let reference = doc
                .reference
                .as_ref()
                .ok_or_else(|| Error::invalid("model needs a data reference"))?;
            let tree = doc
                .tree
                .as_ref()
                .ok_or_else(|| Error::invalid("model needs a calibration tree"))?;
            let partition = DecisionTreePartition::new(tree.d, tree.steps.clone())?;
            let function = DecisionTreeFunction::new(partition, tree.taus.clone(), tree.grid_n)?;
            ClassifierHandle::source_calibrated(sigma, function, load_reference(reference)?)
        }
        other => Err(Error::invalid(format!("unknown model variant {other:?}"))),
    }
}

/// Read a model JSON file and re-instantiate its classifier; referenced
/// datasets resolve relative to the model file's directory.
pub fn load_model(path: impl AsRef<Path>) -> Result<ClassifierHandle> {
    let path = path.as_ref();
    let doc: ModelDoc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    instantiate_model(&doc, base)
}
