//! Browser bindings for the interactive demo page.
//!
//! Three operations back the page: fitting the two-stage classifier on a
//! fresh benchmark draw and rasterising its decision regions, tracing
//! transfer-map curves, and evaluating the risk bound formulas along a
//! source-size scan. Each operation returns a JSON string, so the page works
//! with plain `fetch`-free vanilla JavaScript and no generated glue beyond
//! strings. The JSON builders are ordinary functions, callable and testable
//! on native targets; the exported wrappers only translate errors.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use atl_core::atl::{fit_atl, AtlConfig};
use atl_core::diagnostics::{rate_bounds, risk, risk_bayes, RiskMode};
use atl_core::distributions::{
    bayes_classifier, sample, transfer_value, PairSpec, TransferMapSpec,
};
use atl_core::model::{ClassifierHandle, Dataset, Origin, ParameterVector};
use atl_core::neighbours::SigmaGridSpec;
use atl_core::tree_search::{SearchMode, TauMode, TreeSearchStrategy};
use atl_core::{Error, Result};

/// Upper limits keeping a single-threaded browser tab responsive.
const MAX_SOURCE: usize = 2000;
const MAX_TARGET: usize = 1000;
const MAX_RESOLUTION: usize = 200;
const MAX_CURVE_POINTS: usize = 2001;

/// One scatter point of a training sample.
#[derive(Serialize)]
struct PlotPoint {
    x: f64,
    y: f64,
    label: u8,
}

/// Decision regions of the fitted and the optimal classifier on a square
/// raster, plus the training data and quadrature risks.
#[derive(Serialize)]
struct DecisionSurface {
    setting: u8,
    n_p: usize,
    n_q: usize,
    seed: u64,
    resolution: usize,
    /// Row-major predicted labels of the fitted classifier at the raster
    /// midpoints.
    fitted: Vec<u8>,
    /// Row-major predictions of the optimal rule at the same points.
    optimal: Vec<u8>,
    source: Vec<PlotPoint>,
    target: Vec<PlotPoint>,
    chosen: String,
    test_error: f64,
    excess_error: f64,
    bayes_error: f64,
}

/// Transfer-map values on a shared grid of regression values.
#[derive(Serialize)]
struct TransferCurves {
    z: Vec<f64>,
    identity: Vec<f64>,
    plateau: Vec<f64>,
    steep: Vec<f64>,
    shift_down: Vec<f64>,
    shift_up: Vec<f64>,
}

/// Bound values along a geometric source-size scan at fixed target size.
#[derive(Serialize)]
struct RateCurves {
    n_p: Vec<usize>,
    overall_lower: Vec<f64>,
    overall_upper: Vec<f64>,
    a_upper: Vec<f64>,
    b_upper: Vec<f64>,
}

fn benchmark_pair(setting: u8) -> Result<PairSpec> {
    match setting {
        1 => Ok(PairSpec::setting1()),
        2 => Ok(PairSpec::setting2()),
        other => Err(Error::invalid(format!(
            "setting must be 1 or 2, got {other}"
        ))),
    }
}

/// A fit configuration sized for interactive use: sixteen robustness values
/// per side and a light candidate search.
fn demo_config(seed: u64) -> AtlConfig {
    AtlConfig {
        sigma_grid_p: SigmaGridSpec::Geometric { points: 16 },
        sigma_grid_q: SigmaGridSpec::Geometric { points: 16 },
        l_values: vec![0, 1, 2],
        tree_strategy: TreeSearchStrategy {
            mode: SearchMode::MonteCarlo { num_splits: 60 },
            tau_mode: TauMode::LeafMeanPlusLocalGrid {
                radius: 0.3,
                grid_size: 7,
            },
        },
        seed,
    }
}

fn describe(handle: &ClassifierHandle) -> String {
    match handle {
        ClassifierHandle::SourceCalibrated { sigma, tree, .. } => format!(
            "source margin, {} tree cells, sigma {sigma:.3}",
            tree.partition.leaf_count()
        ),
        ClassifierHandle::TargetKnn { sigma, .. } => {
            format!("target nearest neighbours, sigma {sigma:.3}")
        }
        ClassifierHandle::Constant { label } => format!("constant {label}"),
    }
}

fn scatter(data: &Dataset) -> Vec<PlotPoint> {
    (0..data.len())
        .map(|i| {
            let f = data.features(i);
            PlotPoint {
                x: f[0],
                y: f[1],
                label: data.label(i),
            }
        })
        .collect()
}

/// Simulate a benchmark draw, fit the two-stage classifier, and rasterise
/// its decision regions next to the optimal rule.
pub fn decision_surface_json(
    setting: u8,
    n_p: usize,
    n_q: usize,
    seed: u64,
    resolution: usize,
) -> Result<String> {
    if n_p > MAX_SOURCE {
        return Err(Error::invalid(format!("n_p capped at {MAX_SOURCE} for the demo")));
    }
    if !(4..=MAX_TARGET).contains(&n_q) {
        return Err(Error::invalid(format!(
            "n_q must be between 4 and {MAX_TARGET} for the demo"
        )));
    }
    if !(2..=MAX_RESOLUTION).contains(&resolution) {
        return Err(Error::invalid(format!(
            "resolution must be between 2 and {MAX_RESOLUTION}"
        )));
    }
    let pair = benchmark_pair(setting)?;
    let d_p = sample(&pair, Origin::SourceP, n_p, seed)?;
    let d_q = sample(&pair, Origin::TargetQ, n_q, seed)?;
    let model = fit_atl(&d_p, &d_q, &demo_config(seed))?;

    let mut fitted = Vec::with_capacity(resolution * resolution);
    let mut optimal = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        let y = (row as f64 + 0.5) / resolution as f64;
        for col in 0..resolution {
            let x = (col as f64 + 0.5) / resolution as f64;
            fitted.push(model.chosen.classify(&[x, y])?);
            optimal.push(bayes_classifier(&pair, &[x, y])?);
        }
    }

    let mode = RiskMode::Quadrature {
        points_per_axis: 256,
    };
    let report = risk(&model.chosen, &pair, &mode)?;
    let surface = DecisionSurface {
        setting,
        n_p,
        n_q,
        seed,
        resolution,
        fitted,
        optimal,
        source: scatter(&d_p),
        target: scatter(&d_q),
        chosen: describe(&model.chosen),
        test_error: report.test_error,
        excess_error: report.excess_error,
        bayes_error: report.bayes_error,
    };
    Ok(serde_json::to_string(&surface)?)
}

/// Trace the bundled transfer maps on a shared grid: the identity, a plateau
/// map with the given slope and offset, the steep three-piece map with the
/// given signal level, and the two quarter-shift maps.
pub fn transfer_curves_json(phi: f64, delta: f64, eps: f64, points: usize) -> Result<String> {
    if !(2..=MAX_CURVE_POINTS).contains(&points) {
        return Err(Error::invalid(format!(
            "points must be between 2 and {MAX_CURVE_POINTS}"
        )));
    }
    let plateau = TransferMapSpec::PlateauH { phi, delta };
    let steep = TransferMapSpec::LowerBoundH { eps };
    plateau.validate()?;
    steep.validate()?;
    let maps = [
        TransferMapSpec::Identity,
        plateau,
        steep,
        TransferMapSpec::PiecewiseSetting2Lower,
        TransferMapSpec::PiecewiseSetting2Upper,
    ];
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(points); maps.len() + 1];
    for i in 0..points {
        let z = i as f64 / (points - 1) as f64;
        columns[0].push(z);
        for (j, map) in maps.iter().enumerate() {
            columns[j + 1].push(transfer_value(map, z)?);
        }
    }
    let mut it = columns.into_iter();
    let curves = TransferCurves {
        z: it.next().unwrap(),
        identity: it.next().unwrap(),
        plateau: it.next().unwrap(),
        steep: it.next().unwrap(),
        shift_down: it.next().unwrap(),
        shift_up: it.next().unwrap(),
    };
    Ok(serde_json::to_string(&curves)?)
}

/// The demo's reference parameter vector: the benchmark geometry with the
/// shape parameters exposed by the page.
fn demo_theta(phi: f64, drift: f64, alpha: f64, beta: f64) -> ParameterVector {
    ParameterVector {
        delta: drift,
        phi,
        l_star: 1,
        d: 2,
        d_q: 2.0,
        gamma_q: 1.0,
        d_p: 2.0,
        gamma_p: 1.0,
        c_pq: 6.0,
        alpha,
        c_m: 2.0,
        beta,
        c_s: 7.0,
    }
}

/// Evaluate the risk bound formulas along a geometric source-size scan.
pub fn rate_curves_json(
    phi: f64,
    drift: f64,
    alpha: f64,
    beta: f64,
    n_q: usize,
    confidence: Option<f64>,
    points: usize,
) -> Result<String> {
    if !(2..=201).contains(&points) {
        return Err(Error::invalid("points must be between 2 and 201"));
    }
    let theta = demo_theta(phi, drift, alpha, beta);
    theta.validate()?;
    let max_n_p: f64 = 1e6;
    let mut curves = RateCurves {
        n_p: Vec::with_capacity(points),
        overall_lower: Vec::with_capacity(points),
        overall_upper: Vec::with_capacity(points),
        a_upper: Vec::with_capacity(points),
        b_upper: Vec::with_capacity(points),
    };
    for i in 0..points {
        let t = i as f64 / (points - 1) as f64;
        let n_p = max_n_p.powf(t).round() as usize;
        let bounds = rate_bounds(&theta, n_p, n_q, confidence)?;
        curves.n_p.push(n_p);
        curves.overall_lower.push(bounds.overall_lower);
        curves.overall_upper.push(bounds.overall_upper);
        curves.a_upper.push(bounds.a_upper);
        curves.b_upper.push(bounds.b_upper);
    }
    Ok(serde_json::to_string(&curves)?)
}

/// Quadrature risk of the optimal rule for a benchmark setting, shown as the
/// page's reference line.
pub fn bayes_error_json(setting: u8) -> Result<String> {
    let pair = benchmark_pair(setting)?;
    let report = risk_bayes(
        &pair,
        &RiskMode::Quadrature {
            points_per_axis: 512,
        },
    )?;
    Ok(serde_json::to_string(&report)?)
}

fn to_js<T>(result: Result<T>) -> std::result::Result<T, JsValue> {
    result.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn decision_surface(
    setting: u8,
    n_p: usize,
    n_q: usize,
    seed: u64,
    resolution: usize,
) -> std::result::Result<String, JsValue> {
    to_js(decision_surface_json(setting, n_p, n_q, seed, resolution))
}

#[wasm_bindgen]
pub fn transfer_curves(
    phi: f64,
    delta: f64,
    eps: f64,
    points: usize,
) -> std::result::Result<String, JsValue> {
    to_js(transfer_curves_json(phi, delta, eps, points))
}

#[wasm_bindgen]
pub fn rate_curves(
    phi: f64,
    drift: f64,
    alpha: f64,
    beta: f64,
    n_q: usize,
    confidence: Option<f64>,
    points: usize,
) -> std::result::Result<String, JsValue> {
    to_js(rate_curves_json(phi, drift, alpha, beta, n_q, confidence, points))
}

#[wasm_bindgen]
pub fn bayes_error(setting: u8) -> std::result::Result<String, JsValue> {
    to_js(bayes_error_json(setting))
}
