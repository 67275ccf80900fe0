//! Numerical verification of the structural assumptions and of the
//! finite-sample performance bounds.
//!
//! The checkers estimate the relevant masses by Monte Carlo against their
//! assumed polynomial bounds, with a three-standard-error margin, and use
//! exact closed-form ball masses wherever the marginal admits them. The rate
//! calculator evaluates the displayed bound formulas verbatim.

use serde::{Deserialize, Serialize};

use crate::distributions::{
    bayes_classifier, eta, gamma_cdf, normal_cdf, sample, MarginalSpec, PairSpec,
};
use crate::model::{dist_sq, ClassifierHandle, Origin, ParameterVector};
use crate::seed::rng_from;
use crate::{Error, Result};

/// Grid resolution used by the assumption checkers when evaluating the lower
/// density pointwise.
pub const DEFAULT_OMEGA_GRID: usize = 512;

/// Default per-axis resolution for quadrature risk evaluation.
pub const DEFAULT_QUADRATURE_POINTS: usize = 4096;

/// Exact mass of the closed ball of radius `rho` around `x`.
///
/// Available for the univariate marginals (interval intersection or
/// distribution-function differences) and for lattice mixtures whose cube
/// block is one-dimensional (segment chord plus atom counting).
pub fn ball_mass_exact(marginal: &MarginalSpec, x: &[f64], rho: f64) -> Result<f64> {
    marginal.validate()?;
    if x.len() != marginal.dim() {
        return Err(Error::invalid(format!(
            "point has {} coordinates, marginal dimension is {}",
            x.len(),
            marginal.dim()
        )));
    }
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::invalid(format!("radius must be nonnegative, got {rho}")));
    }
    match *marginal {
        MarginalSpec::UniformCube { d: 1 } => {
            Ok(((x[0] + rho).min(1.0) - (x[0] - rho).max(0.0)).max(0.0))
        }
        MarginalSpec::UniformCube { .. } => Err(Error::invalid(
            "no closed-form ball mass for multivariate cubes; use the certified support bound",
        )),
        MarginalSpec::GammaFamily { gamma } => {
            Ok(gamma_cdf(gamma, x[0] + rho) - gamma_cdf(gamma, x[0] - rho))
        }
        MarginalSpec::GaussianScale { sigma } => {
            Ok(normal_cdf((x[0] + rho) / sigma) - normal_cdf((x[0] - rho) / sigma))
        }
        MarginalSpec::LatticeMixture { w, d_q, .. } => {
            if d_q != 1 {
                return Err(Error::invalid(
                    "lattice ball masses require a one-dimensional cube block",
                ));
            }
            let n = marginal.lattice_atom_count()?;
            if n > 1_000_000 {
                return Err(Error::invalid("too many atoms to enumerate"));
            }
            let (lo, hi) = marginal.lattice_cube_bounds()?;
            // The cube block is the segment [lo, hi] x {0}^(d-1): the ball
            // meets it in a chord of half-length sqrt(rho^2 - c^2), where c
            // is the distance from x to the segment's axis.
            let off_axis_sq: f64 = x[1..].iter().map(|&v| v * v).sum();
            let mut mass = 0.0;
            if rho * rho >= off_axis_sq {
                let half = (rho * rho - off_axis_sq).sqrt();
                let overlap = ((x[0] + half).min(hi) - (x[0] - half).max(lo)).max(0.0);
                mass += (1.0 - w) * overlap / (hi - lo);
            }
            let atom_mass = marginal.lattice_atom_mass()?;
            for t in 0..n {
                let atom = marginal.lattice_atom(t)?;
                if dist_sq(x, &atom) <= rho * rho {
                    mass += atom_mass;
                }
            }
            Ok(mass)
        }
    }
}

/// Pointwise lower density: the infimum over radii in (0, 1) of the ball
/// mass divided by `rho^d0`, evaluated on a geometric grid of `r_grid`
/// points. The grid infimum is an upper bound on the true one, and grids of
/// size `g` and `2g - 1` share points, so refinement can only lower the
/// value.
pub fn lower_density(marginal: &MarginalSpec, x: &[f64], d0: f64, r_grid: usize) -> Result<f64> {
    if !(d0 > 0.0) || !d0.is_finite() {
        return Err(Error::invalid(format!("d0 must be positive, got {d0}")));
    }
    if r_grid < 2 {
        return Err(Error::invalid("the radius grid needs at least two points"));
    }
    let r_min: f64 = 1e-4;
    let r_max: f64 = 1.0 - 1e-6;
    let ratio = r_max / r_min;
    let mut best = f64::INFINITY;
    for i in 0..r_grid {
        let t = i as f64 / (r_grid - 1) as f64;
        let r = r_min * ratio.powf(t);
        let mass = ball_mass_exact(marginal, x, r)?;
        best = best.min(mass / r.powf(d0));
    }
    Ok(best)
}

/// Everywhere-on-support lower bound for the lower density of the uniform
/// distribution on `[0, 1]^d` (with `d0 = d`): any ball around a point of
/// the cube contains a sub-cube of side `rho / (2 sqrt(d))`.
#[must_use]
pub fn uniform_cube_certified_bound(d: usize) -> f64 {
    (2.0 * (d as f64).sqrt()).powi(-(d as i32))
}

/// One tail-mass comparison at a single threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCheckRow {
    pub xi: f64,
    pub fail_mass: f64,
    pub standard_error: f64,
    pub bound: f64,
    pub pass: bool,
    pub method: String,
}

/// Tail check over a threshold grid, for the target's own lower density and
/// for the source's lower density under the target marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub target: Vec<TailCheckRow>,
    pub source: Vec<TailCheckRow>,
    pub pass: bool,
}

enum OmegaRoute {
    Exact,
    CertifiedCube { bound: f64 },
}

fn omega_route(marginal: &MarginalSpec, d0: f64) -> Result<OmegaRoute> {
    match *marginal {
        MarginalSpec::UniformCube { d } if d >= 2 => {
            if (d0 - d as f64).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "the certified cube bound requires d0 = {d}, got {d0}"
                )));
            }
            Ok(OmegaRoute::CertifiedCube {
                bound: uniform_cube_certified_bound(d),
            })
        }
        _ => Ok(OmegaRoute::Exact),
    }
}

fn tail_rows_exact(
    omegas: &[f64],
    xi_grid: &[f64],
    c: f64,
    gamma: f64,
) -> Vec<TailCheckRow> {
    let n = omegas.len() as f64;
    xi_grid
        .iter()
        .map(|&xi| {
            let fails = omegas.iter().filter(|&&w| w < xi).count();
            let p = fails as f64 / n;
            let se = (p * (1.0 - p) / n).sqrt();
            let bound = c * xi.powf(gamma);
            TailCheckRow {
                xi,
                fail_mass: p,
                standard_error: se,
                bound,
                pass: p <= bound + 3.0 * se,
                method: "monte-carlo".into(),
            }
        })
        .collect()
}

fn tail_rows_certified(
    certified: f64,
    xi_grid: &[f64],
    c: f64,
    gamma: f64,
) -> Vec<TailCheckRow> {
    xi_grid
        .iter()
        .map(|&xi| {
            let bound = c * xi.powf(gamma);
            if xi <= certified {
                TailCheckRow {
                    xi,
                    fail_mass: 0.0,
                    standard_error: 0.0,
                    bound,
                    pass: true,
                    method: "certified-support-bound".into(),
                }
            } else {
                // Above the certified level nothing is known beyond the
                // trivial mass bound.
                TailCheckRow {
                    xi,
                    fail_mass: 1.0,
                    standard_error: 0.0,
                    bound,
                    pass: bound >= 1.0,
                    method: "trivial-mass-bound".into(),
                }
            }
        })
        .collect()
}

/// Check the marginal tail assumption: the target mass of the sets where
/// the lower densities fall below each threshold must stay under
/// `c_pq * xi^gamma`, within three standard errors for the Monte-Carlo
/// routes.
#[allow(clippy::too_many_arguments)]
pub fn check_tail_assumption(
    marginal_p: &MarginalSpec,
    marginal_q: &MarginalSpec,
    d_p: f64,
    d_q: f64,
    gamma_p: f64,
    gamma_q: f64,
    c_pq: f64,
    xi_grid: &[f64],
    mc_n: usize,
    seed: u64,
) -> Result<TailReport> {
    marginal_p.validate()?;
    marginal_q.validate()?;
    if !(gamma_p > 0.0 && gamma_q > 0.0) {
        return Err(Error::invalid("tail exponents must be positive"));
    }
    if !(c_pq > 1.0) {
        return Err(Error::invalid(format!("c_pq must exceed 1, got {c_pq}")));
    }
    if xi_grid.is_empty() || xi_grid.iter().any(|&xi| !(xi > 0.0)) {
        return Err(Error::invalid("threshold grid must be nonempty and positive"));
    }
    if mc_n < 2 {
        return Err(Error::invalid("mc_n must be at least 2"));
    }
    if marginal_p.dim() != marginal_q.dim() {
        return Err(Error::invalid("marginal dimensions differ"));
    }
    let route_q = omega_route(marginal_q, d_q)?;
    let route_p = omega_route(marginal_p, d_p)?;
    if matches!(route_p, OmegaRoute::CertifiedCube { .. }) && marginal_p != marginal_q {
        return Err(Error::invalid(
            "the certified cube bound for the source requires identical marginals",
        ));
    }

    let needs_samples =
        matches!(route_q, OmegaRoute::Exact) || matches!(route_p, OmegaRoute::Exact);
    let samples: Vec<Vec<f64>> = if needs_samples {
        let mut rng = rng_from(seed, &[4]);
        (0..mc_n).map(|_| marginal_q.sample_point(&mut rng)).collect()
    } else {
        Vec::new()
    };

    let target = match route_q {
        OmegaRoute::CertifiedCube { bound } => {
            tail_rows_certified(bound, xi_grid, c_pq, gamma_q)
        }
        OmegaRoute::Exact => {
            let omegas: Vec<f64> = samples
                .iter()
                .map(|x| lower_density(marginal_q, x, d_q, DEFAULT_OMEGA_GRID))
                .collect::<Result<_>>()?;
            tail_rows_exact(&omegas, xi_grid, c_pq, gamma_q)
        }
    };
    let source = match route_p {
        OmegaRoute::CertifiedCube { bound } => {
            tail_rows_certified(bound, xi_grid, c_pq, gamma_p)
        }
        OmegaRoute::Exact => {
            let omegas: Vec<f64> = samples
                .iter()
                .map(|x| lower_density(marginal_p, x, d_p, DEFAULT_OMEGA_GRID))
                .collect::<Result<_>>()?;
            tail_rows_exact(&omegas, xi_grid, c_pq, gamma_p)
        }
    };
    let pass = target.iter().chain(&source).all(|row| row.pass);
    Ok(TailReport {
        target,
        source,
        pass,
    })
}

/// One margin-mass comparison at a single width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginCheckRow {
    pub zeta: f64,
    pub mass: f64,
    pub standard_error: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub rows: Vec<MarginCheckRow>,
    pub pass: bool,
}

/// Check the margin assumption: the target mass where the regression
/// function is within `zeta` of 1/2 must stay under `c_m * zeta^alpha`.
pub fn check_margin_assumption(
    spec: &PairSpec,
    alpha: f64,
    c_m: f64,
    zeta_grid: &[f64],
    mc_n: usize,
    seed: u64,
) -> Result<MarginReport> {
    spec.validate()?;
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if !(c_m >= 1.0) {
        return Err(Error::invalid(format!("c_m must be at least 1, got {c_m}")));
    }
    if zeta_grid.is_empty() || zeta_grid.iter().any(|&z| !(z > 0.0)) {
        return Err(Error::invalid("width grid must be nonempty and positive"));
    }
    if mc_n < 2 {
        return Err(Error::invalid("mc_n must be at least 2"));
    }
    let mut rng = rng_from(seed, &[5]);
    let mut gaps = Vec::with_capacity(mc_n);
    for _ in 0..mc_n {
        let x = spec.marginal_q.sample_point(&mut rng);
        gaps.push((spec.eta_q.eval(&x)? - 0.5).abs());
    }
    let n = mc_n as f64;
    let rows: Vec<MarginCheckRow> = zeta_grid
        .iter()
        .map(|&zeta| {
            let hits = gaps.iter().filter(|&&g| g < zeta).count();
            let p = hits as f64 / n;
            let se = (p * (1.0 - p) / n).sqrt();
            let bound = c_m * zeta.powf(alpha);
            MarginCheckRow {
                zeta,
                mass: p,
                standard_error: se,
                bound,
                pass: p <= bound + 3.0 * se,
            }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Ok(MarginReport { rows, pass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub max_ratio: f64,
    pub pairs_evaluated: usize,
    pub pass: bool,
}

/// Check the smoothness assumption on sampled point pairs: the largest
/// observed increment of the regression function relative to
/// `distance^beta` must stay under `c_s`.
pub fn check_smoothness(
    spec: &PairSpec,
    which: Origin,
    beta: f64,
    c_s: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<SmoothnessReport> {
    spec.validate()?;
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid(format!("beta must be in (0, 1], got {beta}")));
    }
    if !(c_s >= 1.0) {
        return Err(Error::invalid(format!("c_s must be at least 1, got {c_s}")));
    }
    if n_pairs == 0 {
        return Err(Error::invalid("need at least one pair"));
    }
    let marginal = match which {
        Origin::SourceP => &spec.marginal_p,
        Origin::TargetQ => &spec.marginal_q,
    };
    let tag = match which {
        Origin::SourceP => 1,
        Origin::TargetQ => 2,
    };
    let mut rng = rng_from(seed, &[6, tag]);
    let mut max_ratio: f64 = 0.0;
    let mut evaluated = 0usize;
    for _ in 0..n_pairs {
        let a = marginal.sample_point(&mut rng);
        let b = marginal.sample_point(&mut rng);
        let dist = dist_sq(&a, &b).sqrt();
        if dist < 1e-12 {
            continue;
        }
        let gap = (eta(spec, which, &a)? - eta(spec, which, &b)?).abs();
        max_ratio = max_ratio.max(gap / dist.powf(beta));
        evaluated += 1;
    }
    Ok(SmoothnessReport {
        max_ratio,
        pairs_evaluated: evaluated,
        pass: max_ratio <= c_s + 1e-9,
    })
}

/// How to evaluate classifier risk under a pair: a fresh Monte-Carlo test
/// draw, or a deterministic tensor midpoint quadrature (uniform-cube
/// marginals only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RiskMode {
    MonteCarlo { n: usize, seed: u64 },
    Quadrature { points_per_axis: usize },
}

/// Test error and excess over the optimum, with the evaluation size and a
/// standard error for the Monte-Carlo route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub test_error: f64,
    pub excess_error: f64,
    pub bayes_error: f64,
    pub n: usize,
    pub standard_error: Option<f64>,
}

fn risk_of(
    predict: &mut dyn FnMut(&[f64]) -> Result<u8>,
    spec: &PairSpec,
    mode: &RiskMode,
) -> Result<RiskReport> {
    spec.validate()?;
    match *mode {
        RiskMode::MonteCarlo { n, seed } => {
            if n < 2 {
                return Err(Error::invalid("Monte-Carlo risk needs n >= 2"));
            }
            let data = sample(spec, Origin::TargetQ, n, seed)?;
            let mut wrong = 0usize;
            let mut bayes_wrong = 0usize;
            for i in 0..n {
                let x = data.features(i);
                let y = data.label(i);
                if predict(x)? != y {
                    wrong += 1;
                }
                if bayes_classifier(spec, x)? != y {
                    bayes_wrong += 1;
                }
            }
            let test_error = wrong as f64 / n as f64;
            let bayes_error = bayes_wrong as f64 / n as f64;
            let se = (test_error * (1.0 - test_error) / n as f64).sqrt();
            Ok(RiskReport {
                test_error,
                excess_error: test_error - bayes_error,
                bayes_error,
                n,
                standard_error: Some(se),
            })
        }
        RiskMode::Quadrature { points_per_axis } => {
            let d = match spec.marginal_q {
                MarginalSpec::UniformCube { d } => d,
                _ => {
                    return Err(Error::invalid(
                        "quadrature risk is only available for uniform-cube marginals",
                    ))
                }
            };
            if points_per_axis < 2 {
                return Err(Error::invalid("quadrature needs at least two points per axis"));
            }
            let total = (points_per_axis as u128).checked_pow(d as u32);
            let total = match total {
                Some(t) if t <= 200_000_000 => t as usize,
                _ => return Err(Error::invalid("quadrature grid is too large")),
            };
            let g = points_per_axis;
            let mut x = vec![0.0f64; d];
            let mut idx = vec![0usize; d];
            let mut test_sum = 0.0;
            let mut bayes_sum = 0.0;
            for _ in 0..total {
                for (xj, &ij) in x.iter_mut().zip(idx.iter()) {
                    *xj = (ij as f64 + 0.5) / g as f64;
                }
                let p = eta(spec, Origin::TargetQ, &x)?;
                test_sum += if predict(&x)? == 1 { 1.0 - p } else { p };
                bayes_sum += p.min(1.0 - p);
                for ij in idx.iter_mut().rev() {
                    *ij += 1;
                    if *ij < g {
                        break;
                    }
                    *ij = 0;
                }
            }
            let test_error = test_sum / total as f64;
            let bayes_error = bayes_sum / total as f64;
            Ok(RiskReport {
                test_error,
                excess_error: test_error - bayes_error,
                bayes_error,
                n: total,
                standard_error: None,
            })
        }
    }
}

/// Risk of a fitted classifier under the pair's target distribution.
pub fn risk(classifier: &ClassifierHandle, spec: &PairSpec, mode: &RiskMode) -> Result<RiskReport> {
    risk_of(&mut |x| classifier.classify(x), spec, mode)
}

/// Risk of the optimal classifier (its excess is zero by construction).
pub fn risk_bayes(spec: &PairSpec, mode: &RiskMode) -> Result<RiskReport> {
    risk_of(&mut |x| bayes_classifier(spec, x), spec, mode)
}

/// The finite-sample bound terms: `a`/`b` pairs for the lower and upper
/// bounds, the additive high-confidence term, and the assembled overall
/// bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub a_lower: f64,
    pub b_lower: f64,
    pub overall_lower: f64,
    pub a_upper: f64,
    pub b_upper: f64,
    pub d_term: f64,
    pub overall_upper: f64,
    pub delta: Option<f64>,
}

/// `log_+(x)`: the natural logarithm for arguments at least `e`, and 1
/// otherwise.
#[must_use]
pub fn log_plus(x: f64) -> f64 {
    if x >= std::f64::consts::E {
        x.ln()
    } else {
        1.0
    }
}

/// Evaluate the excess-risk bound formulas at the given sample sizes.
///
/// Without a confidence level this gives the expectation bounds: the lower
/// terms use unit log factors and the upper terms logarithmic ones, and each
/// overall bound is the minimum of its two terms and 1. With a confidence
/// level `delta` the upper terms switch to their `delta`-dependent log
/// factors and gain the additive `d_term`; the overall upper bound is then
/// `min(a, b) + d_term`. A zero source size sends the first `a`-summand to
/// infinity, leaving the overall bounds governed by the remaining terms.
pub fn rate_bounds(
    theta: &ParameterVector,
    n_p: usize,
    n_q: usize,
    delta: Option<f64>,
) -> Result<RateBounds> {
    theta.validate()?;
    if let Some(dl) = delta {
        if !(dl > 0.0 && dl < 1.0) {
            return Err(Error::invalid(format!("delta must be in (0, 1), got {dl}")));
        }
    }
    let alpha = theta.alpha;
    let beta = theta.beta;
    let phi = theta.phi;
    let l_star = theta.l_star as f64;
    let d = theta.d as f64;
    let np = n_p as f64;
    let nq = n_q as f64;

    let exp_a = beta * theta.gamma_p * (1.0 + alpha)
        / (theta.gamma_p * (2.0 * beta + theta.d_p) + alpha * beta);
    let exp_b = beta * theta.gamma_q * (1.0 + alpha)
        / (theta.gamma_q * (2.0 * beta + theta.d_q) + alpha * beta);
    let exp_mid = (1.0 + alpha) / (2.0 + alpha);

    let a_term = |a0: f64, a1: f64| -> f64 {
        let first = if n_p == 0 {
            f64::INFINITY
        } else {
            (a0 / (phi * phi * np)).powf(exp_a)
        };
        let second = (l_star * a1 / nq)
            .powf(exp_mid)
            .min((1.0 - phi).powf(1.0 + alpha));
        let third = (theta.delta / phi).powf(1.0 + alpha);
        first + second + third
    };
    let b_term = |b: f64| -> f64 { (b / nq).powf(exp_b) };

    let a_lower = a_term(1.0, 1.0);
    let b_lower = b_term(1.0);
    let overall_lower = a_lower.min(b_lower).min(1.0);

    let (a_upper, b_upper, d_term, overall_upper) = match delta {
        None => {
            let a = a_term(log_plus(np), log_plus(l_star * d * (np + nq)));
            let b = b_term(log_plus(nq));
            (a, b, 0.0, a.min(b).min(1.0))
        }
        Some(dl) => {
            let a = a_term(log_plus(np / dl), log_plus(l_star * d * np / dl));
            let b = b_term(log_plus(nq / dl));
            let d_term = (log_plus((np + nq) / dl) / nq).powf(exp_mid);
            (a, b, d_term, a.min(b) + d_term)
        }
    };

    Ok(RateBounds {
        a_lower,
        b_lower,
        overall_lower,
        a_upper,
        b_upper,
        d_term,
        overall_upper,
        delta,
    })
}
