//! Infinite factorial linear dynamical systems (IFLDS) for transient
//! signal detection.
//!
//! The crate has three layers:
//!
//! - **Representation**: a factorial linear dynamical system ([`model`])
//!   whose chain count is unbounded under a sticky Markov Indian buffet
//!   process prior, learned by MCMC ([`learn`]: slice sampling of the
//!   chain count, particle Gibbs with ancestor sampling for the local
//!   variables, conjugate Gibbs for the globals).
//! - **Filtering**: factorial Kalman forward filtering ([`fkff`]) giving
//!   the recursive predictive observation density and log-likelihood.
//! - **Detection**: finite-moving-average, CUSUM and Shewhart stopping
//!   rules on the reformulated log-likelihood ratio, with closed-form
//!   thresholds and performance bounds ([`detect`]).
//!
//! [`bench`] reproduces the simulation studies at desk scale and backs
//! the `iflds` command-line tool.

pub mod bench;
pub mod detect;
pub mod dist;
pub mod fkff;
pub mod io;
pub mod learn;
pub mod model;
pub mod rng;
pub mod scenario;
pub mod stats;

pub use rng::RngHandle;

/// Crate-wide error type.
///
/// `Invalid` covers configuration/input validation (CLI exit code 2),
/// `Numerical` covers runtime numerical failures (CLI exit code 3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
