//! Synthetic source/target distribution pairs with exact samplers and
//! analytic oracles.
//!
//! A pair is described by two marginals, a target regression function, and a
//! per-cell list of transfer maps relating the source regression function to
//! the target one: `eta_P = g_cell(x) (eta_Q(x))`. Two ready-made pairs drive
//! the experiment harness; the lattice-mixture constructions and the
//! hypercube family over sign vectors realise the worst-case instances used
//! to probe the method's limits.

use serde::{Deserialize, Serialize};

use crate::model::{Dataset, DecisionTreePartition, LabeledSample, Origin, SplitStep};
use crate::seed::rng_from;
use crate::{Error, Result};

use rand::Rng;

/// A feature-space marginal distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MarginalSpec {
    /// Uniform on the unit cube `[0, 1]^d`.
    UniformCube { d: usize },
    /// A mixture of a uniform cube of side `kappa_Q` in the negative orthant
    /// (mass `1 - w`) and `N` equally weighted lattice atoms in the positive
    /// orthant (total mass `w`). The lattice spans the first `d0` of `d`
    /// coordinates with spacing `r * kappa_P / q`; `d0` selects whether the
    /// atoms fill the target block (`d0 = d_q`) or the full source block
    /// (`d0 = d_p`).
    LatticeMixture {
        q: usize,
        r: f64,
        w: f64,
        d0: usize,
        d_q: usize,
        d_p: usize,
        d: usize,
    },
    /// Univariate densities on the positive half-line with polynomial tail
    /// exponent `gamma`; `gamma = 1` is the unit exponential, `gamma > 1`
    /// has bounded support `[0, 1/(gamma-1)]`.
    GammaFamily { gamma: f64 },
    /// Centred univariate Gaussian with standard deviation `sigma`.
    GaussianScale { sigma: f64 },
}

impl MarginalSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MarginalSpec::UniformCube { d } => {
                if d == 0 {
                    return Err(Error::invalid("cube dimension must be at least 1"));
                }
            }
            MarginalSpec::LatticeMixture {
                q,
                r,
                w,
                d0,
                d_q,
                d_p,
                d,
            } => {
                if q == 0 {
                    return Err(Error::invalid("q must be at least 1"));
                }
                if !(r > 0.0) || !r.is_finite() {
                    return Err(Error::invalid("r must be positive and finite"));
                }
                if !(0.0..=0.5).contains(&w) {
                    return Err(Error::invalid(format!("w must be in [0, 1/2], got {w}")));
                }
                if !(1 <= d_q && d_q <= d_p && d_p <= d) {
                    return Err(Error::invalid(format!(
                        "dimensions must satisfy 1 <= d_q <= d_p <= d, got d_q={d_q}, d_p={d_p}, d={d}"
                    )));
                }
                if d0 != d_p && d0 != d_q {
                    return Err(Error::invalid(format!(
                        "d0 must equal d_q ({d_q}) or d_p ({d_p}), got {d0}"
                    )));
                }
            }
            MarginalSpec::GammaFamily { gamma } => {
                if !(gamma > 0.0) || !gamma.is_finite() {
                    return Err(Error::invalid("gamma must be positive and finite"));
                }
            }
            MarginalSpec::GaussianScale { sigma } => {
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::invalid("sigma must be positive and finite"));
                }
            }
        }
        Ok(())
    }

    /// Ambient dimension of sampled points.
    #[must_use]
    pub fn dim(&self) -> usize {
        match *self {
            MarginalSpec::UniformCube { d } => d,
            MarginalSpec::LatticeMixture { d, .. } => d,
            MarginalSpec::GammaFamily { .. } | MarginalSpec::GaussianScale { .. } => 1,
        }
    }

    /// Draw one point. Consumes RNG values in a fixed documented order
    /// (component selector first where applicable, then coordinates), so
    /// draws are reproducible from the stream alone.
    pub fn sample_point(&self, rng: &mut impl Rng) -> Vec<f64> {
        match *self {
            MarginalSpec::UniformCube { d } => {
                (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()
            }
            MarginalSpec::LatticeMixture { w, d, .. } => {
                if rng.gen_bool(w) {
                    let n = self.lattice_atom_count().expect("validated spec");
                    let t = rng.gen_range(0..n);
                    self.lattice_atom(t).expect("validated spec")
                } else {
                    let (lo, hi) = self.lattice_cube_bounds().expect("validated spec");
                    let d_q = match *self {
                        MarginalSpec::LatticeMixture { d_q, .. } => d_q,
                        _ => unreachable!(),
                    };
                    let mut x = vec![0.0; d];
                    for coord in x.iter_mut().take(d_q) {
                        *coord = rng.gen_range(lo..hi);
                    }
                    x
                }
            }
            MarginalSpec::GammaFamily { gamma } => {
                let u: f64 = rng.gen();
                vec![gamma_quantile(gamma, u)]
            }
            MarginalSpec::GaussianScale { sigma } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                vec![sigma * z]
            }
        }
    }

    /// Cumulative distribution function for the univariate variants.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        match *self {
            MarginalSpec::UniformCube { d: 1 } => Ok(x.clamp(0.0, 1.0)),
            MarginalSpec::GammaFamily { gamma } => Ok(gamma_cdf(gamma, x)),
            MarginalSpec::GaussianScale { sigma } => Ok(normal_cdf(x / sigma)),
            _ => Err(Error::invalid(
                "cumulative distribution is only available for univariate marginals",
            )),
        }
    }

    /// Side of the lattice mixture's cube component, `kappa_Q`.
    pub fn lattice_kappa_q(&self) -> Result<f64> {
        match *self {
            MarginalSpec::LatticeMixture { d_q, .. } => Ok(0.5 / (d_q as f64).sqrt()),
            _ => Err(Error::invalid("not a lattice mixture")),
        }
    }

    /// Source-block scale `kappa_P`.
    pub fn lattice_kappa_p(&self) -> Result<f64> {
        match *self {
            MarginalSpec::LatticeMixture { d_p, .. } => Ok(0.5 / (d_p as f64).sqrt()),
            _ => Err(Error::invalid("not a lattice mixture")),
        }
    }

    /// Lattice spacing `r * kappa_P / q`.
    pub fn lattice_spacing(&self) -> Result<f64> {
        match *self {
            MarginalSpec::LatticeMixture { q, r, .. } => {
                Ok(r * self.lattice_kappa_p()? / q as f64)
            }
            _ => Err(Error::invalid("not a lattice mixture")),
        }
    }

    /// Per-axis extent `M` of the lattice beyond the first block:
    /// `min(ceil(q / (r kappa_P)), q)`.
    pub fn lattice_extent(&self) -> Result<usize> {
        match *self {
            MarginalSpec::LatticeMixture { q, r, .. } => {
                let kappa_p = self.lattice_kappa_p()?;
                let m = (q as f64 / (r * kappa_p)).ceil() as usize;
                Ok(m.min(q).max(1))
            }
            _ => Err(Error::invalid("not a lattice mixture")),
        }
    }

    /// Number of lattice atoms `N = q^{d_q} * M^{d0 - d_q}`.
    pub fn lattice_atom_count(&self) -> Result<usize> {
        match *self {
            MarginalSpec::LatticeMixture { q, d0, d_q, .. } => {
                let m = self.lattice_extent()?;
                let first = q
                    .checked_pow(d_q as u32)
                    .ok_or_else(|| Error::invalid("atom count overflows"))?;
                let second = m
                    .checked_pow((d0 - d_q) as u32)
                    .ok_or_else(|| Error::invalid("atom count overflows"))?;
                first
                    .checked_mul(second)
                    .ok_or_else(|| Error::invalid("atom count overflows"))
            }
            _ => Err(Error::invalid("not a lattice mixture")),
        }
    }

    /// Coordinates of atom `t`.
    ///
    /// Atoms are enumerated with the first block minor: writing
    /// `t = b * q^{d_q} + a`, `a` indexes the first `d_q` coordinates
    /// (row-major, base `q`) and `b` the remaining `d0 - d_q` coordinates
    /// (row-major, base `M`), so the atoms shared by both blocks are exactly
    /// `t < q^{d_q}`.
    pub fn lattice_atom(&self, t: usize) -> Result<Vec<f64>> {
        match *self {
            MarginalSpec::LatticeMixture {
                q, d0, d_q, d, ..
            } => {
                let n = self.lattice_atom_count()?;
                if t >= n {
                    return Err(Error::invalid(format!("atom index {t} out of 0..{n}")));
                }
                let m = self.lattice_extent()?;
                let spacing = self.lattice_spacing()?;
                let first = q.pow(d_q as u32);
                let mut a = t % first;
                let mut b = t / first;
                let mut digits = vec![0usize; d0];
                for j in (0..d_q).rev() {
                    digits[j] = a % q;
                    a /= q;
                }
                for j in (d_q..d0).rev() {
                    digits[j] = b % m;
                    b /= m;
                }
                let mut x = vec![0.0; d];
                for (j, &digit) in digits.iter().enumerate() {
                    x[j] = spacing * digit as f64;
                }
                Ok(x)
            }
            _ => Err(Error::invalid("not a lattice mixture")),
        }
    }

    /// Per-coordinate bounds `[-kappa_Q (1 + r), -r kappa_Q]` of the cube
    /// component's first `d_q` coordinates.
    pub fn lattice_cube_bounds(&self) -> Result<(f64, f64)> {
        match *self {
            MarginalSpec::LatticeMixture { r, .. } => {
                let kappa_q = self.lattice_kappa_q()?;
                Ok((-kappa_q * (1.0 + r), -r * kappa_q))
            }
            _ => Err(Error::invalid("not a lattice mixture")),
        }
    }

    /// Mass of the cube component, `1 - w`.
    pub fn lattice_cube_mass(&self) -> Result<f64> {
        match *self {
            MarginalSpec::LatticeMixture { w, .. } => Ok(1.0 - w),
            _ => Err(Error::invalid("not a lattice mixture")),
        }
    }

    /// Mass of a single atom, `w / N`.
    pub fn lattice_atom_mass(&self) -> Result<f64> {
        match *self {
            MarginalSpec::LatticeMixture { w, .. } => {
                Ok(w / self.lattice_atom_count()? as f64)
            }
            _ => Err(Error::invalid("not a lattice mixture")),
        }
    }
}

/// Quantile function of the polynomial-tail family.
fn gamma_quantile(gamma: f64, u: f64) -> f64 {
    if gamma == 1.0 {
        -(1.0 - u).ln()
    } else if gamma < 1.0 {
        ((1.0 - u).powf(-(1.0 - gamma) / gamma) - 1.0) / (1.0 - gamma)
    } else {
        (1.0 - (1.0 - u).powf((gamma - 1.0) / gamma)) / (gamma - 1.0)
    }
}

/// Distribution function of the polynomial-tail family.
pub(crate) fn gamma_cdf(gamma: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if gamma == 1.0 {
        1.0 - (-x).exp()
    } else if gamma < 1.0 {
        1.0 - (1.0 + (1.0 - gamma) * x).powf(-gamma / (1.0 - gamma))
    } else {
        let end = 1.0 / (gamma - 1.0);
        if x >= end {
            1.0
        } else {
            1.0 - (1.0 - (gamma - 1.0) * x).powf(gamma / (gamma - 1.0))
        }
    }
}

/// Standard normal distribution function via the complementary error
/// function.
pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// A target regression function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegressionSpec {
    /// `eta(x) = (1 + sin(4 pi x_1)) / 2`.
    Sinusoid,
    /// The regression function living on a lattice-mixture support: a smooth
    /// dip on the cube component, `1/2 + sign_t * eps` on the shared-block
    /// atoms, and `1/2 - 2 eps` on the remaining atoms. Defined only on the
    /// support; off-support queries are errors.
    LatticeEta {
        eps: f64,
        beta: f64,
        q: usize,
        r: f64,
        d_q: usize,
        d_p: usize,
        d: usize,
        signs: Vec<i8>,
    },
    /// Constant regression value.
    Constant { v: f64 },
}

/// Tolerance for recognising support membership of lattice geometries after
/// round trips through text formats.
const SUPPORT_TOL: f64 = 1e-9;

impl RegressionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            RegressionSpec::Sinusoid => Ok(()),
            RegressionSpec::Constant { v } => {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::invalid(format!("constant value {v} outside [0, 1]")));
                }
                Ok(())
            }
            RegressionSpec::LatticeEta {
                eps,
                beta,
                q,
                r,
                d_q,
                d_p,
                d,
                signs,
            } => {
                if !(0.0..=0.125).contains(eps) {
                    return Err(Error::invalid(format!("eps must be in [0, 1/8], got {eps}")));
                }
                if !(*beta > 0.0 && *beta <= 1.0) {
                    return Err(Error::invalid(format!("beta must be in (0, 1], got {beta}")));
                }
                if *q == 0 || !(*r > 0.0) {
                    return Err(Error::invalid("q must be >= 1 and r > 0"));
                }
                if !(1 <= *d_q && d_q <= d_p && d_p <= d) {
                    return Err(Error::invalid("dimensions must satisfy 1 <= d_q <= d_p <= d"));
                }
                let m = q
                    .checked_pow(*d_q as u32)
                    .ok_or_else(|| Error::invalid("sign vector length overflows"))?;
                if signs.len() != m {
                    return Err(Error::invalid(format!(
                        "{} signs for {m} shared-block atoms",
                        signs.len()
                    )));
                }
                if signs.iter().any(|&s| s != 1 && s != -1) {
                    return Err(Error::invalid("signs must be +1 or -1"));
                }
                Ok(())
            }
        }
    }

    /// The lattice-mixture geometry this regression function lives on, with
    /// the full source block (`d0 = d_p`) and a placeholder weight.
    fn lattice_geometry(&self) -> Result<MarginalSpec> {
        match self {
            RegressionSpec::LatticeEta {
                q, r, d_q, d_p, d, ..
            } => Ok(MarginalSpec::LatticeMixture {
                q: *q,
                r: *r,
                w: 0.5,
                d0: *d_p,
                d_q: *d_q,
                d_p: *d_p,
                d: *d,
            }),
            _ => Err(Error::invalid("not a lattice regression function")),
        }
    }

    /// Evaluate the regression function at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            RegressionSpec::Sinusoid => {
                if x.is_empty() {
                    return Err(Error::invalid("point must have at least one coordinate"));
                }
                Ok(0.5 * (1.0 + (4.0 * std::f64::consts::PI * x[0]).sin()))
            }
            RegressionSpec::Constant { v } => Ok(*v),
            RegressionSpec::LatticeEta {
                eps,
                beta,
                q,
                d_q,
                d_p,
                d,
                signs,
                ..
            } => {
                if x.len() != *d {
                    return Err(Error::invalid(format!(
                        "point has {} coordinates, support dimension is {d}",
                        x.len()
                    )));
                }
                let geometry = self.lattice_geometry()?;
                let (lo, hi) = geometry.lattice_cube_bounds()?;
                let in_cube = x[..*d_q]
                    .iter()
                    .all(|&v| v >= lo - SUPPORT_TOL && v <= hi + SUPPORT_TOL)
                    && x[*d_q..].iter().all(|&v| v.abs() <= SUPPORT_TOL);
                if in_cube {
                    // Distance to the cube corner closest to the origin.
                    let mut dist_sq = 0.0;
                    for (j, &v) in x.iter().enumerate() {
                        let c = if j < *d_q { hi } else { 0.0 };
                        dist_sq += (v - c) * (v - c);
                    }
                    return Ok(0.5 - 2.0 * eps - 0.25 * dist_sq.sqrt().powf(*beta));
                }
                let spacing = geometry.lattice_spacing()?;
                let m = geometry.lattice_extent()?;
                let mut digits = vec![0usize; *d_p];
                for j in 0..*d {
                    if j >= *d_p {
                        if x[j].abs() > SUPPORT_TOL {
                            return Err(Error::invalid("point is outside the support"));
                        }
                        continue;
                    }
                    let k = (x[j] / spacing).round();
                    if k < 0.0 || (x[j] - k * spacing).abs() > SUPPORT_TOL {
                        return Err(Error::invalid("point is outside the support"));
                    }
                    let k = k as usize;
                    let limit = if j < *d_q { *q } else { m };
                    if k >= limit {
                        return Err(Error::invalid("point is outside the support"));
                    }
                    digits[j] = k;
                }
                if digits[*d_q..].iter().all(|&k| k == 0) {
                    let mut t = 0usize;
                    for &k in &digits[..*d_q] {
                        t = t * q + k;
                    }
                    Ok(0.5 + f64::from(signs[t]) * eps)
                } else {
                    Ok(0.5 - 2.0 * eps)
                }
            }
        }
    }
}

/// A map relating source and target regression values on one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TransferMapSpec {
    Identity,
    /// `z -> a + b z`.
    Affine { a: f64, b: f64 },
    /// `z -> max(0, z - 1/4)`.
    PiecewiseSetting2Lower,
    /// `z -> min(z + 1/4, 1)`.
    PiecewiseSetting2Upper,
    /// The three-piece map fixing `[0, 1/2 - 2 eps]`, rising steeply to
    /// `1/2 + eps` at `1/2 - eps`, then continuing affinely to `h(1) = 1`.
    LowerBoundH { eps: f64 },
    /// Slope-`phi` affine map with a flat plateau at `1/2` of half-width
    /// `delta / phi`.
    PlateauH { phi: f64, delta: f64 },
}

impl TransferMapSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TransferMapSpec::Identity
            | TransferMapSpec::PiecewiseSetting2Lower
            | TransferMapSpec::PiecewiseSetting2Upper => Ok(()),
            TransferMapSpec::Affine { a, b } => {
                for z in [0.0, 1.0] {
                    let v = a + b * z;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::invalid(format!(
                            "affine map leaves [0, 1]: value {v} at z = {z}"
                        )));
                    }
                }
                Ok(())
            }
            TransferMapSpec::LowerBoundH { eps } => {
                if !(0.0..=0.25).contains(&eps) {
                    return Err(Error::invalid(format!("eps must be in [0, 1/4], got {eps}")));
                }
                Ok(())
            }
            TransferMapSpec::PlateauH { phi, delta } => {
                if !(phi > 0.0 && phi <= 1.0) {
                    return Err(Error::invalid(format!("phi must be in (0, 1], got {phi}")));
                }
                if !(0.0..=0.5).contains(&(delta / phi)) || delta < 0.0 {
                    return Err(Error::invalid(format!(
                        "delta must be in [0, phi/2], got {delta} with phi = {phi}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Evaluate a transfer map at `z` in `[0, 1]`.
pub fn transfer_value(map: &TransferMapSpec, z: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::invalid(format!(
            "transfer maps are defined on [0, 1], got {z}"
        )));
    }
    // Every valid map sends [0, 1] into itself; the clamp only removes
    // last-ulp rounding drift (the steep map's upper piece evaluates to a
    // quotient that rounds just above 1 at z = 1).
    let value = match *map {
        TransferMapSpec::Identity => z,
        TransferMapSpec::Affine { a, b } => a + b * z,
        TransferMapSpec::PiecewiseSetting2Lower => (z - 0.25).max(0.0),
        TransferMapSpec::PiecewiseSetting2Upper => (z + 0.25).min(1.0),
        TransferMapSpec::LowerBoundH { eps } => {
            if z <= 0.5 - 2.0 * eps {
                z
            } else if z <= 0.5 - eps {
                3.0 * z + 4.0 * eps - 1.0
            } else {
                ((1.0 - 2.0 * eps) * z + 4.0 * eps) / (1.0 + 2.0 * eps)
            }
        }
        TransferMapSpec::PlateauH { phi, delta } => {
            let half_width = delta / phi;
            if z < 0.5 - half_width {
                phi * (z - 0.5) + 0.5 + delta
            } else if z <= 0.5 + half_width {
                0.5
            } else {
                phi * (z - 0.5) + 0.5 - delta
            }
        }
    };
    Ok(value.clamp(0.0, 1.0))
}

/// A full source/target pair: marginals, target regression function, and a
/// partition with one transfer map per cell defining the source regression
/// function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub marginal_p: MarginalSpec,
    pub marginal_q: MarginalSpec,
    pub eta_q: RegressionSpec,
    pub partition: DecisionTreePartition,
    pub transfers: Vec<TransferMapSpec>,
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        self.marginal_p.validate()?;
        self.marginal_q.validate()?;
        self.eta_q.validate()?;
        self.partition.validate()?;
        if self.marginal_p.dim() != self.marginal_q.dim() {
            return Err(Error::invalid("marginal dimensions differ"));
        }
        if self.partition.dim() != self.marginal_q.dim() {
            return Err(Error::invalid(
                "partition dimension does not match the marginals",
            ));
        }
        if self.transfers.len() != self.partition.leaf_count() {
            return Err(Error::invalid(format!(
                "{} transfer maps for {} cells",
                self.transfers.len(),
                self.partition.leaf_count()
            )));
        }
        for t in &self.transfers {
            t.validate()?;
        }
        Ok(())
    }

    /// Ambient dimension of the pair.
    #[must_use]
    pub fn dim(&self) -> usize {
        self.marginal_q.dim()
    }

    /// The first ready-made pair: uniform marginals on the unit square, a
    /// sinusoidal target regression function, and one global affine transfer
    /// map of slope 0.8.
    #[must_use]
    pub fn setting1() -> Self {
        PairSpec {
            marginal_p: MarginalSpec::UniformCube { d: 2 },
            marginal_q: MarginalSpec::UniformCube { d: 2 },
            eta_q: RegressionSpec::Sinusoid,
            partition: DecisionTreePartition::trivial(2),
            transfers: vec![TransferMapSpec::Affine { a: 0.2, b: 0.8 }],
        }
    }

    /// The second ready-made pair: as the first, but with two cells split at
    /// `x_2 = 1/2` carrying shifted clamped transfer maps.
    #[must_use]
    pub fn setting2() -> Self {
        let partition = DecisionTreePartition::new(
            2,
            vec![SplitStep {
                leaf: 0,
                axis: 1,
                threshold: 0.5,
            }],
        )
        .expect("static partition is valid");
        // Cell 0 is the upper half-plane (x_2 >= 1/2), cell 1 the lower.
        PairSpec {
            marginal_p: MarginalSpec::UniformCube { d: 2 },
            marginal_q: MarginalSpec::UniformCube { d: 2 },
            eta_q: RegressionSpec::Sinusoid,
            partition,
            transfers: vec![
                TransferMapSpec::PiecewiseSetting2Upper,
                TransferMapSpec::PiecewiseSetting2Lower,
            ],
        }
    }

    /// Load a pair description from a JSON file and validate it.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let spec: PairSpec = serde_json::from_str(&std::fs::read_to_string(path.as_ref())?)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Write the pair description as JSON.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), json + "\n")?;
        Ok(())
    }
}

/// The regression value of the requested side at `x`.
pub fn eta(spec: &PairSpec, which: Origin, x: &[f64]) -> Result<f64> {
    let z = spec.eta_q.eval(x)?;
    match which {
        Origin::TargetQ => Ok(z),
        Origin::SourceP => {
            let cell = spec.partition.leaf_of(x)?;
            transfer_value(&spec.transfers[cell], z)
        }
    }
}

/// The optimal target classifier: 1 exactly when the target regression
/// value is at least 1/2.
pub fn bayes_classifier(spec: &PairSpec, x: &[f64]) -> Result<u8> {
    Ok(u8::from(eta(spec, Origin::TargetQ, x)? >= 0.5))
}

/// Draw `n` labelled samples from the requested side.
///
/// The RNG stream is derived from the seed and the side, so source and
/// target draws with equal seeds are independent; per sample, coordinates
/// are drawn first and then one uniform for the label.
pub fn sample(spec: &PairSpec, which: Origin, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let marginal = match which {
        Origin::SourceP => &spec.marginal_p,
        Origin::TargetQ => &spec.marginal_q,
    };
    let tag = match which {
        Origin::SourceP => 1,
        Origin::TargetQ => 2,
    };
    let mut rng = rng_from(seed, &[tag]);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let x = marginal.sample_point(&mut rng);
        let p = eta(spec, which, &x)?;
        let u: f64 = rng.gen();
        let y = u8::from(u < p);
        samples.push(LabeledSample::new(x, y)?);
    }
    Dataset::new(samples, which, marginal.dim())
}

/// Parameters of the sign-indexed family of lattice pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssouadParams {
    pub q: usize,
    pub r: f64,
    pub w_p: f64,
    pub w_q: f64,
    pub eps_p: f64,
    pub eps_q: f64,
    pub beta: f64,
    pub d_q: usize,
    pub d_p: usize,
    pub d: usize,
}

impl AssouadParams {
    /// Number of sign coordinates, `q^{d_q}`.
    pub fn num_signs(&self) -> Result<usize> {
        self.q
            .checked_pow(self.d_q as u32)
            .ok_or_else(|| Error::invalid("sign count overflows"))
    }

    pub fn validate(&self) -> Result<()> {
        let probe = MarginalSpec::LatticeMixture {
            q: self.q,
            r: self.r,
            w: self.w_q,
            d0: self.d_q,
            d_q: self.d_q,
            d_p: self.d_p,
            d: self.d,
        };
        probe.validate()?;
        if !(0.0..=0.5).contains(&self.w_p) {
            return Err(Error::invalid("w_p must be in [0, 1/2]"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid("beta must be in (0, 1]"));
        }
        if self.eps_p < 0.0 || self.eps_p > self.eps_q {
            return Err(Error::invalid(format!(
                "signal levels must satisfy 0 <= eps_p <= eps_q, got {} and {}",
                self.eps_p, self.eps_q
            )));
        }
        let spacing = probe.lattice_spacing()?;
        let admissible = (0.125f64).min(spacing.powf(self.beta) / 6.0);
        if self.eps_q > admissible {
            return Err(Error::invalid(format!(
                "eps_q = {} exceeds the admissible level {admissible} for this geometry",
                self.eps_q
            )));
        }
        Ok(())
    }
}

/// A partition isolating each of the given points into its own cell.
///
/// Cells are refined deterministically: the lowest-index cell holding more
/// than one point is split along the first axis where its points differ, at
/// the midpoint between the two largest distinct coordinate values.
fn isolating_partition(
    points: &[Vec<f64>],
    d: usize,
) -> Result<(DecisionTreePartition, Vec<Option<usize>>)> {
    let mut steps: Vec<SplitStep> = Vec::new();
    let mut cell_of: Vec<usize> = vec![0; points.len()];
    loop {
        let cells = steps.len() + 1;
        let mut split_cell = None;
        for c in 0..cells {
            if cell_of.iter().filter(|&&cc| cc == c).count() > 1 {
                split_cell = Some(c);
                break;
            }
        }
        let Some(c) = split_cell else { break };
        let members: Vec<usize> = (0..points.len()).filter(|&i| cell_of[i] == c).collect();
        let mut step = None;
        for axis in 0..d {
            let mut coords: Vec<f64> = members.iter().map(|&i| points[i][axis]).collect();
            coords.sort_by(f64::total_cmp);
            coords.dedup();
            if coords.len() > 1 {
                let hi = coords[coords.len() - 1];
                let lo = coords[coords.len() - 2];
                step = Some(SplitStep {
                    leaf: c,
                    axis,
                    threshold: 0.5 * (lo + hi),
                });
                break;
            }
        }
        let step = step.ok_or_else(|| Error::invalid("duplicate points cannot be isolated"))?;
        for &i in &members {
            if points[i][step.axis] < step.threshold {
                cell_of[i] = cells;
            }
        }
        steps.push(step);
    }
    let partition = DecisionTreePartition::new(d, steps)?;
    let mut atom_of_cell = vec![None; partition.leaf_count()];
    for (i, &c) in cell_of.iter().enumerate() {
        atom_of_cell[c] = Some(i);
    }
    Ok((partition, atom_of_cell))
}

/// One pair of the sign-indexed family.
///
/// The marginals and the source regression function do not depend on the
/// signs; only the target regression function flips at the shared-block
/// atoms. The transfer maps witness the cell-wise relation between the two
/// regression functions for the given signs:
///
/// * equal signal levels use the identity map;
/// * a weaker positive source level uses a slope-one plateau map absorbing
///   the difference;
/// * a vanishing source level isolates every shared-block atom in its own
///   cell and pairs negative-sign cells with the steep three-piece map, so
///   the source regression value is `1/2 + eps_q` at every atom regardless
///   of the signs.
pub fn assouad_pair(params: &AssouadParams, signs: &[i8]) -> Result<PairSpec> {
    params.validate()?;
    let m = params.num_signs()?;
    if signs.len() != m {
        return Err(Error::invalid(format!(
            "{} signs for {m} shared-block atoms",
            signs.len()
        )));
    }
    if signs.iter().any(|&s| s != 1 && s != -1) {
        return Err(Error::invalid("signs must be +1 or -1"));
    }
    let marginal_p = MarginalSpec::LatticeMixture {
        q: params.q,
        r: params.r,
        w: params.w_p,
        d0: params.d_p,
        d_q: params.d_q,
        d_p: params.d_p,
        d: params.d,
    };
    let marginal_q = MarginalSpec::LatticeMixture {
        q: params.q,
        r: params.r,
        w: params.w_q,
        d0: params.d_q,
        d_q: params.d_q,
        d_p: params.d_p,
        d: params.d,
    };
    let eta_q = RegressionSpec::LatticeEta {
        eps: params.eps_q,
        beta: params.beta,
        q: params.q,
        r: params.r,
        d_q: params.d_q,
        d_p: params.d_p,
        d: params.d,
        signs: signs.to_vec(),
    };

    let (partition, transfers) = if params.eps_p == params.eps_q {
        (
            DecisionTreePartition::trivial(params.d),
            vec![TransferMapSpec::Identity],
        )
    } else if params.eps_p > 0.0 {
        (
            DecisionTreePartition::trivial(params.d),
            vec![TransferMapSpec::PlateauH {
                phi: 1.0,
                delta: params.eps_q - params.eps_p,
            }],
        )
    } else {
        // eps_p = 0: per-atom cells; negative signs get the steep map that
        // sends 1/2 - eps_q to 1/2 + eps_q, positive signs keep identity.
        // Both maps fix everything at or below 1/2 - 2 eps_q, so the cube
        // and the remaining atoms are unaffected by the cell layout.
        let atoms: Vec<Vec<f64>> = (0..m)
            .map(|t| marginal_q.lattice_atom(t))
            .collect::<Result<_>>()?;
        let (partition, atom_of_cell) = isolating_partition(&atoms, params.d)?;
        let transfers = atom_of_cell
            .iter()
            .map(|slot| match slot {
                Some(t) if signs[*t] == -1 => TransferMapSpec::LowerBoundH { eps: params.eps_q },
                _ => TransferMapSpec::Identity,
            })
            .collect();
        (partition, transfers)
    };

    let spec = PairSpec {
        marginal_p,
        marginal_q,
        eta_q,
        partition,
        transfers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Every pair of the family, one per sign vector, ordered by the binary
/// encoding of the signs (bit `t` set means `sign_t = +1`).
pub fn assouad_family(params: &AssouadParams) -> Result<Vec<PairSpec>> {
    let m = params.num_signs()?;
    if m > 20 {
        return Err(Error::invalid(format!(
            "family over {m} sign coordinates is too large to enumerate"
        )));
    }
    let mut out = Vec::with_capacity(1 << m);
    for mask in 0u64..(1 << m) {
        let signs: Vec<i8> = (0..m)
            .map(|t| if mask & (1 << t) != 0 { 1 } else { -1 })
            .collect();
        out.push(assouad_pair(params, &signs)?);
    }
    Ok(out)
}
