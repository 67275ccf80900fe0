//! Adaptive transfer learning for binary classification.
//!
//! The library implements a two-sample classifier for the covariate-plus-label
//! shift setting: a large sample from a source distribution P and a small
//! sample from the target distribution Q, linked cell by cell through monotone
//! transfer maps on the regression function. The classifier combines
//! nearest-neighbour margin estimates, a robustness-indexed adaptive choice of
//! neighbourhood size, decision-tree calibration of the source margins, and a
//! final empirical risk minimisation over held-out target data.
//!
//! Alongside the estimator itself the crate ships:
//!
//! - exact samplers and oracles for the synthetic distribution pairs used to
//!   benchmark the method, including the lattice-mixture constructions whose
//!   minimax behaviour the estimator is designed to match,
//! - numerical diagnostics for the structural assumptions (tail, margin and
//!   smoothness conditions) plus a calculator for the theoretical risk bounds,
//! - an experiment harness that reruns the reference simulation study and
//!   writes its result table deterministically.
//!
//! The modules mirror that split: [`model`] holds the shared domain types,
//! [`neighbours`] the margin and neighbourhood machinery, [`tree_search`] the
//! candidate-tree generation and empirical risk minimisation, [`atl`] the
//! assembled pipeline, [`distributions`] the synthetic pairs, [`diagnostics`]
//! the checkers and rate formulas, and [`harness`] the experiment runner.

pub mod atl;
pub mod diagnostics;
pub mod distributions;
pub mod harness;
pub mod model;
pub mod neighbours;
pub mod seed;
pub mod tree_search;

mod engine;

use std::fmt;

/// Library error type.
///
/// `Invalid` marks precondition and validation failures (bad arguments,
/// malformed configuration); `Runtime` marks environmental failures such as
/// I/O problems. The CLI maps the two variants to exit codes 2 and 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    Invalid(String),
    Runtime(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
            Error::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Runtime(e.to_string())
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
