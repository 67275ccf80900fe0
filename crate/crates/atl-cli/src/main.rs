//! Command-line front end for the adaptive transfer learning toolkit.
//!
//! Six subcommands cover the full workflow: `simulate` draws labelled data
//! from a distribution pair, `fit` trains the two-stage classifier, `evaluate`
//! scores a fitted model against the generating distribution, and
//! `reproduce-table1` reruns the reference simulation study. `check-assumptions`
//! and `rates` probe the structural assumptions numerically and evaluate the
//! finite-sample risk bound formulas.
//!
//! Exit codes: 0 on success, 2 when inputs fail validation (bad flags, missing
//! or malformed files), 1 on runtime failures such as I/O errors while writing
//! results. The `ATL_THREADS` environment variable caps parallel workers;
//! thread count never changes any output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use atl_core::atl::{export_model, fit_atl, load_model, AtlConfig};
use atl_core::diagnostics::{
    check_margin_assumption, check_smoothness, check_tail_assumption, rate_bounds, risk,
    MarginReport, RateBounds, RiskMode, RiskReport, SmoothnessReport, TailReport,
    DEFAULT_QUADRATURE_POINTS,
};
use atl_core::distributions::{sample, PairSpec};
use atl_core::harness::reproduce_table1;
use atl_core::model::{Dataset, Origin, ParameterVector};
use atl_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "atl",
    version,
    about = "Adaptive transfer learning: simulate, fit, evaluate, diagnose"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw labelled samples from one side of a distribution pair.
    Simulate {
        /// Distribution pair description (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Which side to sample: P (source) or Q (target).
        #[arg(long)]
        which: String,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Seed for the draw.
        #[arg(long)]
        seed: u64,
        /// Output CSV path; a `.manifest.json` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the two-stage classifier on source and target CSV data.
    Fit {
        /// Source dataset CSV (origin P). Omit to fit from target data alone.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Target dataset CSV (origin Q).
        #[arg(long)]
        target: PathBuf,
        /// Fit configuration (JSON); defaults apply when omitted, and partial
        /// files override only the fields they set.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the fitted model (JSON).
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Estimate the risk of a fitted model under a distribution pair.
    Evaluate {
        /// Fitted model (JSON); referenced datasets resolve relative to it.
        #[arg(long)]
        model: PathBuf,
        /// Distribution pair description (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Risk estimator: `mc` (Monte Carlo) or `quad` (tensor quadrature).
        #[arg(long)]
        mode: EvaluateMode,
        /// Monte Carlo test sample size.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Monte Carlo seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Quadrature points per axis.
        #[arg(long, default_value_t = DEFAULT_QUADRATURE_POINTS)]
        points_per_axis: usize,
    },
    /// Rerun the reference simulation study and write its result table.
    #[command(name = "reproduce-table1")]
    ReproduceTable1 {
        /// Output directory for the CSV and text table.
        #[arg(long)]
        out: PathBuf,
        /// Master seed; every repetition derives its own streams from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker thread cap; overrides ATL_THREADS (0 means all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check the structural assumptions of a distribution pair numerically.
    CheckAssumptions {
        /// Distribution pair description (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Assumption parameters (JSON).
        #[arg(long)]
        theta: PathBuf,
        /// Monte Carlo sample size per check.
        #[arg(long, default_value_t = 20_000)]
        mc_n: usize,
        /// Seed for the Monte Carlo draws.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Density levels for the tail check.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.1, 0.2, 0.4])]
        xi: Vec<f64>,
        /// Margin widths for the low-noise check.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.1, 0.2, 0.4])]
        zeta: Vec<f64>,
        /// Point pairs for the smoothness ratio scan.
        #[arg(long, default_value_t = 1_000)]
        pairs: usize,
    },
    /// Evaluate the finite-sample risk bound formulas for given sample sizes.
    Rates {
        /// Assumption parameters (JSON).
        #[arg(long)]
        theta: PathBuf,
        /// Source sample size.
        #[arg(long)]
        np: usize,
        /// Target sample size.
        #[arg(long)]
        nq: usize,
        /// Confidence level for the high-probability bound; omit for the
        /// expectation bound.
        #[arg(long)]
        delta: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvaluateMode {
    Mc,
    Quad,
}

/// Risk evaluation output: input echo plus the estimate itself.
#[derive(Serialize)]
struct EvaluateReport {
    model: String,
    spec: String,
    mode: RiskMode,
    risk: RiskReport,
}

/// Assumption check output: input echo, one report per condition, and the
/// conjunction of their pass flags.
#[derive(Serialize)]
struct AssumptionsReport {
    theta: ParameterVector,
    mc_n: usize,
    seed: u64,
    smoothness_pairs: usize,
    tail: TailReport,
    margin: MarginReport,
    smoothness_target: SmoothnessReport,
    smoothness_source: SmoothnessReport,
    pass: bool,
}

/// Rate bound output: input echo plus the evaluated bound terms.
#[derive(Serialize)]
struct RatesReport {
    theta: ParameterVector,
    n_p: usize,
    n_q: usize,
    bounds: RateBounds,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Invalid(_) => ExitCode::from(2),
                Error::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}

/// Read and deserialize a JSON input file; any failure is a validation error
/// because the file is caller-supplied.
fn load_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{what} {} is malformed: {e}", path.display())))
}

fn load_spec(path: &Path) -> Result<PairSpec> {
    let spec: PairSpec = load_json(path, "distribution file")?;
    spec.validate()?;
    Ok(spec)
}

fn load_theta(path: &Path) -> Result<ParameterVector> {
    let theta: ParameterVector = load_json(path, "parameter file")?;
    theta.validate()?;
    Ok(theta)
}

/// Read a dataset CSV named on the command line. Failures, including a
/// missing sidecar manifest, count as validation errors here.
fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_csv(path).map_err(|e| match e {
        Error::Runtime(msg) => Error::invalid(format!("cannot load {}: {msg}", path.display())),
        other => other,
    })
}

/// The dataset path to record inside a model file. Absolute when the file
/// can be resolved now, so the model keeps working from any directory.
fn recorded_path(path: &Path) -> String {
    std::fs::canonicalize(path)
        .unwrap_or_else(|_| path.to_path_buf())
        .display()
        .to_string()
}

fn print_json(report: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            spec,
            which,
            n,
            seed,
            out,
        } => {
            let pair = load_spec(&spec)?;
            let origin = Origin::from_code(&which)?;
            let data = sample(&pair, origin, n, seed)?;
            data.write_csv(&out)?;
            println!(
                "wrote {} samples from side {} to {}",
                data.len(),
                origin.code(),
                out.display()
            );
            Ok(())
        }
        Command::Fit {
            source,
            target,
            config,
            model_out,
        } => {
            let target_data = load_dataset(&target)?;
            let source_data = match &source {
                Some(p) => load_dataset(p)?,
                None => Dataset::new(Vec::new(), Origin::SourceP, target_data.dim())?,
            };
            let cfg = match &config {
                Some(p) => {
                    let cfg: AtlConfig = load_json(p, "config file")?;
                    cfg.validate()?;
                    cfg
                }
                None => AtlConfig::default(),
            };
            let model = fit_atl(&source_data, &target_data, &cfg)?;
            let source_path = source.as_deref().map(recorded_path);
            export_model(
                &model,
                source_path.as_deref(),
                &recorded_path(&target),
                &model_out,
            )?;
            println!(
                "fitted family of {} classifiers; wrote choice {} to {}",
                model.holdout_errors.len(),
                model.chosen_index,
                model_out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            model,
            spec,
            mode,
            n,
            seed,
            points_per_axis,
        } => {
            let classifier = load_model(&model).map_err(|e| match e {
                Error::Runtime(msg) => {
                    Error::invalid(format!("cannot load {}: {msg}", model.display()))
                }
                other => other,
            })?;
            let pair = load_spec(&spec)?;
            let risk_mode = match mode {
                EvaluateMode::Mc => RiskMode::MonteCarlo { n, seed },
                EvaluateMode::Quad => RiskMode::Quadrature { points_per_axis },
            };
            let report = EvaluateReport {
                model: model.display().to_string(),
                spec: spec.display().to_string(),
                mode: risk_mode,
                risk: risk(&classifier, &pair, &risk_mode)?,
            };
            print_json(&report)
        }
        Command::ReproduceTable1 { out, seed, threads } => {
            let output = reproduce_table1(&out, seed, threads)?;
            print!("{}", std::fs::read_to_string(&output.txt_path)?);
            println!("wrote {}", output.csv_path.display());
            println!("wrote {}", output.txt_path.display());
            Ok(())
        }
        Command::CheckAssumptions {
            spec,
            theta,
            mc_n,
            seed,
            xi,
            zeta,
            pairs,
        } => {
            let pair = load_spec(&spec)?;
            let theta = load_theta(&theta)?;
            let tail = check_tail_assumption(
                &pair.marginal_p,
                &pair.marginal_q,
                theta.d_p,
                theta.d_q,
                theta.gamma_p,
                theta.gamma_q,
                theta.c_pq,
                &xi,
                mc_n,
                seed,
            )?;
            let margin = check_margin_assumption(&pair, theta.alpha, theta.c_m, &zeta, mc_n, seed)?;
            let smoothness_target =
                check_smoothness(&pair, Origin::TargetQ, theta.beta, theta.c_s, pairs, seed)?;
            let smoothness_source =
                check_smoothness(&pair, Origin::SourceP, theta.beta, theta.c_s, pairs, seed)?;
            let pass =
                tail.pass && margin.pass && smoothness_target.pass && smoothness_source.pass;
            let report = AssumptionsReport {
                theta,
                mc_n,
                seed,
                smoothness_pairs: pairs,
                tail,
                margin,
                smoothness_target,
                smoothness_source,
                pass,
            };
            print_json(&report)
        }
        Command::Rates {
            theta,
            np,
            nq,
            delta,
        } => {
            let theta = load_theta(&theta)?;
            let bounds = rate_bounds(&theta, np, nq, delta)?;
            let report = RatesReport {
                theta,
                n_p: np,
                n_q: nq,
                bounds,
            };
            print_json(&report)
        }
    }
}
