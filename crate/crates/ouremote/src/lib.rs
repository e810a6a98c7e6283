//! Simulation and numerical-optimization toolkit for sampling an
//! Ornstein-Uhlenbeck signal that is reported to a remote estimator over a
//! channel with random service times.
//!
//! The crate answers three questions about the stationary mean-square
//! estimation error (MSE) of such a link:
//!
//! * what is the best achievable MSE over all causal sampling policies that
//!   respect the one-packet-in-flight channel discipline,
//! * which threshold policy attains it, and
//! * how much a cheap, noisy sensor degrades it.
//!
//! Module layout mirrors the pipeline: [`specfun`] supplies the error-style
//! special functions behind the optimal threshold, [`process`] the exact
//! signal transition law, [`channel`] the first-come-first-serve service
//! model, [`estimation`] the minimum-MSE estimator, [`policy`] the sampling
//! policies behind a common trait with a by-name registry, [`sim`] the
//! event-driven cycle simulator, [`solver`] the fixed-point search for the
//! optimal long-run MSE, and [`eval`] the lower/upper bound reports.
//! [`config`], [`experiment`] and [`selftest`] back the command-line tool.

pub mod channel;
pub mod config;
pub mod estimation;
pub mod eval;
pub mod experiment;
pub mod policy;
pub mod process;
pub mod rng;
pub mod selftest;
pub mod sim;
pub mod solver;
pub mod specfun;
pub mod stats;

pub use config::ExperimentConfig;
pub use process::OuParams;
