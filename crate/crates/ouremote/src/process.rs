//! Exact conditional law of the signal process and the statistics of the
//! estimation gap that accumulates while a sample is in flight.
//!
//! The signal follows `dX = theta (mu - X) dt + sigma dW`. All transitions
//! here use the exact Gaussian conditional law, never an Euler step, so the
//! step size of the surrounding simulation affects only event detection and
//! quadrature, not the marginal distributions.

use crate::channel::ServiceModel;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Drift rates with |theta| below this are routed to the driftless
/// (Brownian) formulas; the generic expressions lose precision there.
pub const WIENER_THETA_EPS: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum ProcessError {
    #[error("{what}: {why}")]
    DomainError { what: &'static str, why: String },
    #[error("first exit not reached within {max_time} time units (threshold {v} may be unreachable)")]
    NonConvergence { max_time: f64, v: f64 },
}

/// Qualitative drift regime; selects among the three threshold formulas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// theta > 0: mean-reverting, stationary variance sigma^2/(2 theta).
    Stable,
    /// theta = 0 (within [`WIENER_THETA_EPS`]): driftless Brownian motion.
    Wiener,
    /// theta < 0: mean-repelling, variance grows without bound.
    Unstable,
}

/// Parameters of the signal SDE `dX = theta (mu - X) dt + sigma dW`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl OuParams {
    pub fn new(theta: f64, mu: f64, sigma: f64) -> Result<Self, ProcessError> {
        if !theta.is_finite() || !mu.is_finite() {
            return Err(ProcessError::DomainError {
                what: "OuParams",
                why: format!("theta and mu must be finite, got theta={theta}, mu={mu}"),
            });
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ProcessError::DomainError {
                what: "OuParams",
                why: format!("sigma must be positive and finite, got {sigma}"),
            });
        }
        Ok(Self { theta, mu, sigma })
    }

    pub fn is_wiener(&self) -> bool {
        self.theta.abs() < WIENER_THETA_EPS
    }

    pub fn regime(&self) -> Regime {
        if self.is_wiener() {
            Regime::Wiener
        } else if self.theta > 0.0 {
            Regime::Stable
        } else {
            Regime::Unstable
        }
    }

    /// sigma^2/(2 theta) for the stable regime, `None` otherwise.
    pub fn stationary_variance(&self) -> Option<f64> {
        match self.regime() {
            Regime::Stable => Some(self.sigma * self.sigma / (2.0 * self.theta)),
            _ => None,
        }
    }
}

/// Conditional mean and variance of `X_{t+dt}` given `X_t = x`.
pub fn transition_moments(x: f64, dt: f64, params: &OuParams) -> (f64, f64) {
    let decay = if params.is_wiener() {
        1.0
    } else {
        (-params.theta * dt).exp()
    };
    let mean = params.mu + (x - params.mu) * decay;
    (mean, gap_variance(dt, params))
}

/// Variance accumulated by the zero-mean gap process over an age of `y`
/// time units: sigma^2 (1 - e^(-2 theta y))/(2 theta), or sigma^2 y in the
/// driftless case. This is also the conditional transition variance.
pub fn gap_variance(y: f64, params: &OuParams) -> f64 {
    let s2 = params.sigma * params.sigma;
    if params.is_wiener() {
        s2 * y
    } else {
        // -expm1 keeps full precision for small theta*y of either sign.
        s2 * (-f64::exp_m1(-2.0 * params.theta * y)) / (2.0 * params.theta)
    }
}

/// One exact transition step of length `dt` from state `x`.
pub fn transition_sample<R: Rng + ?Sized>(
    x: f64,
    dt: f64,
    params: &OuParams,
    rng: &mut R,
) -> Result<f64, ProcessError> {
    if !(dt >= 0.0) {
        return Err(ProcessError::DomainError {
            what: "transition_sample",
            why: format!("dt must be nonnegative, got {dt}"),
        });
    }
    let (mean, var) = transition_moments(x, dt, params);
    let z: f64 = rng.sample(StandardNormal);
    Ok(mean + var.sqrt() * z)
}

/// Value of the zero-mean gap process at age `y` (started from 0).
pub fn sample_gap<R: Rng + ?Sized>(y: f64, params: &OuParams, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    gap_variance(y, params).sqrt() * z
}

/// Precomputed coefficients for repeated exact transitions with a fixed
/// step. `advance` draws the stochastic update; `flow` applies only the
/// deterministic mean reversion, which is how a remote reconstruction of
/// the signal evolves between deliveries.
#[derive(Clone, Copy, Debug)]
pub struct TransitionStep {
    mu: f64,
    decay: f64,
    noise_std: f64,
}

impl TransitionStep {
    pub fn new(params: &OuParams, dt: f64) -> Result<Self, ProcessError> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(ProcessError::DomainError {
                what: "TransitionStep",
                why: format!("dt must be nonnegative and finite, got {dt}"),
            });
        }
        let decay = if params.is_wiener() {
            1.0
        } else {
            (-params.theta * dt).exp()
        };
        Ok(Self {
            mu: params.mu,
            decay,
            noise_std: gap_variance(dt, params).sqrt(),
        })
    }

    #[inline]
    pub fn advance<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.flow(x) + self.noise_std * z
    }

    /// Deterministic part of the transition: mu + (x - mu) e^(-theta dt).
    #[inline]
    pub fn flow(&self, x: f64) -> f64 {
        self.mu + (x - self.mu) * self.decay
    }
}

/// Best achievable MSE over all sampling policies: the mean gap variance at
/// a random service-time age, E[gap_variance(Y)].
///
/// Uses the exact expression whenever the service model has a closed-form
/// transform E[e^(-2 theta Y)] (constant, exponential and gamma service, and
/// any service in the driftless case via E[Y]); otherwise averages
/// `gap_variance` over `n_draws` Monte Carlo service draws.
pub fn mse_lower_bound<R: Rng + ?Sized>(
    service: &ServiceModel,
    params: &OuParams,
    n_draws: u64,
    rng: &mut R,
) -> f64 {
    let s2 = params.sigma * params.sigma;
    if params.is_wiener() {
        return s2 * service.mean();
    }
    if let Some(m) = service.exp_neg_two_theta_moment(params.theta) {
        return s2 * (1.0 - m) / (2.0 * params.theta);
    }
    let mut acc = crate::stats::KahanSum::new();
    for _ in 0..n_draws {
        acc.add(gap_variance(service.draw(rng), params));
    }
    acc.value() / n_draws as f64
}

/// First time the zero-mean gap process, started at `q` with |q| < v, exits
/// the band (-v, v). Grid simulation with exact transitions; the result is
/// accurate to O(dt) in distribution (exits between grid points are
/// detected one step late).
pub fn simulate_exit_time<R: Rng + ?Sized>(
    q: f64,
    v: f64,
    params: &OuParams,
    dt: f64,
    rng: &mut R,
) -> Result<f64, ProcessError> {
    if !(v > 0.0) || q.abs() >= v {
        return Err(ProcessError::DomainError {
            what: "simulate_exit_time",
            why: format!("need |q| < v with v > 0, got q={q}, v={v}"),
        });
    }
    if !(dt > 0.0) {
        return Err(ProcessError::DomainError {
            what: "simulate_exit_time",
            why: format!("dt must be positive, got {dt}"),
        });
    }
    // The gap process is the signal with mu = 0.
    let centered = OuParams {
        theta: params.theta,
        mu: 0.0,
        sigma: params.sigma,
    };
    let step = TransitionStep::new(&centered, dt)?;
    const MAX_STEPS: u64 = 200_000_000;
    let mut x = q;
    for k in 1..=MAX_STEPS {
        x = step.advance(x, rng);
        if x.abs() >= v {
            return Ok(k as f64 * dt);
        }
    }
    Err(ProcessError::NonConvergence {
        max_time: MAX_STEPS as f64 * dt,
        v,
    })
}
