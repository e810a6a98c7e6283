//! Sampling policies behind a common trait, plus the map from a target
//! long-run MSE to the optimal sampling threshold.
//!
//! Policies are registered by name in a [`PolicyRegistry`] so binaries and
//! configs can select them as data; new variants plug in without touching
//! the simulator.

use crate::process::{OuParams, Regime};
use crate::specfun::{self, SpecFunError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("unknown policy {name:?}; available: {available}")]
    UnknownPolicy { name: String, available: String },
    #[error("policy {policy:?} requires parameter {param:?}")]
    MissingParameter {
        policy: &'static str,
        param: &'static str,
    },
    #[error("{what}: {why}")]
    DomainError { what: &'static str, why: String },
    #[error(transparent)]
    SpecFun(#[from] SpecFunError),
}

/// Snapshot of everything a policy may consult at a decision epoch.
#[derive(Clone, Copy, Debug)]
pub struct SampleContext {
    pub t: f64,
    /// Current signal value (the sampler observes its own signal exactly).
    pub signal: f64,
    /// The sampler's mirror of the remote estimate (noise-free anchors).
    pub estimate: f64,
    /// Whether the channel can accept a sample right now.
    pub channel_idle: bool,
    pub last_sample_time: f64,
}

impl SampleContext {
    /// Signed gap between the signal and the remote reconstruction.
    pub fn gap(&self) -> f64 {
        self.signal - self.estimate
    }
}

/// A causal sampling rule. Implementations must be cheap: `decide_sample`
/// runs at every simulation step while the channel is idle.
pub trait SamplingPolicy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Take a sample now? Only consulted when a sample could actually be
    /// submitted (callers pass `channel_idle` accordingly, but policies
    /// should still respect the flag).
    fn decide_sample(&self, ctx: &SampleContext) -> bool;

    /// The magnitude threshold this policy fires at, if it is of that
    /// family. Lets the simulator pick a step size fine enough to resolve
    /// first crossings.
    fn threshold(&self) -> Option<f64> {
        None
    }

    /// Human-readable parameterization for logs and result records.
    fn describe(&self) -> String {
        self.name().to_string()
    }
}

/// Sample when the absolute reconstruction gap reaches `v`. With v = 0 this
/// degenerates into [`ZeroWaitPolicy`].
#[derive(Clone, Copy, Debug)]
pub struct ThresholdPolicy {
    v: f64,
}

impl ThresholdPolicy {
    pub fn new(v: f64) -> Result<Self, PolicyError> {
        if v.is_finite() && v >= 0.0 {
            Ok(Self { v })
        } else {
            Err(PolicyError::DomainError {
                what: "ThresholdPolicy",
                why: format!("threshold must be nonnegative and finite, got {v}"),
            })
        }
    }

    pub fn v(&self) -> f64 {
        self.v
    }
}

impl SamplingPolicy for ThresholdPolicy {
    fn name(&self) -> &'static str {
        "threshold"
    }

    fn decide_sample(&self, ctx: &SampleContext) -> bool {
        ctx.channel_idle && ctx.gap().abs() >= self.v
    }

    fn threshold(&self) -> Option<f64> {
        Some(self.v)
    }

    fn describe(&self) -> String {
        format!("threshold(v={})", self.v)
    }
}

/// Sample the instant the channel becomes free.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroWaitPolicy;

impl SamplingPolicy for ZeroWaitPolicy {
    fn name(&self) -> &'static str {
        "zero-wait"
    }

    fn decide_sample(&self, ctx: &SampleContext) -> bool {
        ctx.channel_idle
    }

    fn describe(&self) -> String {
        "zero-wait".to_string()
    }
}

/// Sample every `period` time units, deferring while the channel is busy.
#[derive(Clone, Copy, Debug)]
pub struct PeriodicPolicy {
    period: f64,
}

impl PeriodicPolicy {
    pub fn new(period: f64) -> Result<Self, PolicyError> {
        if period.is_finite() && period > 0.0 {
            Ok(Self { period })
        } else {
            Err(PolicyError::DomainError {
                what: "PeriodicPolicy",
                why: format!("period must be positive and finite, got {period}"),
            })
        }
    }
}

impl SamplingPolicy for PeriodicPolicy {
    fn name(&self) -> &'static str {
        "periodic"
    }

    fn decide_sample(&self, ctx: &SampleContext) -> bool {
        ctx.channel_idle && ctx.t >= ctx.last_sample_time + self.period
    }

    fn describe(&self) -> String {
        format!("periodic(T={})", self.period)
    }
}

/// Optimal threshold for a target long-run MSE `beta`, given the best
/// achievable MSE `mse_y` (see `process::mse_lower_bound`).
///
/// Three regimes:
/// * stable: v = sigma/sqrt(theta) * g_inv((m - mse_y)/(m - beta)) with
///   m = sigma^2/(2 theta); requires mse_y <= beta < m.
/// * driftless: v = sqrt(3 (beta - mse_y)) (the sigma factors cancel).
/// * unstable: v = sigma/sqrt(-theta) * k_inv((m - mse_y)/(m - beta)),
///   where m < 0 makes the ratio fall in (0, 1].
pub fn threshold_v(beta: f64, params: &OuParams, mse_y: f64) -> Result<f64, PolicyError> {
    if !beta.is_finite() || beta < mse_y {
        return Err(PolicyError::DomainError {
            what: "threshold_v",
            why: format!("target MSE {beta} below the lower bound {mse_y}"),
        });
    }
    match params.regime() {
        Regime::Stable => {
            let m = params.stationary_variance().expect("stable");
            if beta >= m {
                return Err(PolicyError::DomainError {
                    what: "threshold_v",
                    why: format!(
                        "target MSE {beta} at or above the no-sampling ceiling {m}; \
                         no finite threshold attains it"
                    ),
                });
            }
            let ratio = (m - mse_y) / (m - beta);
            Ok(params.sigma / params.theta.sqrt() * specfun::g_inv(ratio)?)
        }
        Regime::Wiener => Ok((3.0 * (beta - mse_y)).sqrt()),
        Regime::Unstable => {
            let m = params.sigma * params.sigma / (2.0 * params.theta); // negative
            let ratio = (m - mse_y) / (m - beta);
            Ok(params.sigma / (-params.theta).sqrt() * specfun::k_inv(ratio)?)
        }
    }
}

/// A solved (target MSE, threshold) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSpec {
    pub beta: f64,
    pub v: f64,
}

impl ThresholdSpec {
    pub fn from_beta(beta: f64, params: &OuParams, mse_y: f64) -> Result<Self, PolicyError> {
        Ok(Self {
            beta,
            v: threshold_v(beta, params, mse_y)?,
        })
    }
}

/// Parameters a registry builder may consume.
#[derive(Clone, Copy, Debug, Default)]
pub struct PolicyParams {
    pub threshold: Option<f64>,
    pub period: Option<f64>,
}

pub type PolicyBuilder = fn(&PolicyParams) -> Result<Box<dyn SamplingPolicy>, PolicyError>;

/// By-name policy constructors. `standard()` registers the three built-in
/// families; `register` accepts project-specific ones.
pub struct PolicyRegistry {
    builders: BTreeMap<&'static str, PolicyBuilder>,
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    pub fn standard() -> Self {
        let mut reg = Self::empty();
        reg.register("threshold", |p| {
            let v = p.threshold.ok_or(PolicyError::MissingParameter {
                policy: "threshold",
                param: "threshold",
            })?;
            Ok(Box::new(ThresholdPolicy::new(v)?))
        });
        reg.register("zero-wait", |_| Ok(Box::new(ZeroWaitPolicy)));
        reg.register("periodic", |p| {
            let period = p.period.ok_or(PolicyError::MissingParameter {
                policy: "periodic",
                param: "period",
            })?;
            Ok(Box::new(PeriodicPolicy::new(period)?))
        });
        reg
    }

    pub fn register(&mut self, name: &'static str, builder: PolicyBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(
        &self,
        name: &str,
        params: &PolicyParams,
    ) -> Result<Box<dyn SamplingPolicy>, PolicyError> {
        match self.builders.get(name) {
            Some(b) => b(params),
            None => Err(PolicyError::UnknownPolicy {
                name: name.to_string(),
                available: self.names().join(", "),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(t: f64, gap: f64, idle: bool, last: f64) -> SampleContext {
        SampleContext {
            t,
            signal: gap,
            estimate: 0.0,
            channel_idle: idle,
            last_sample_time: last,
        }
    }

    #[test]
    fn threshold_policy_decision_table() {
        let p = ThresholdPolicy::new(1.5).unwrap();
        assert!(p.decide_sample(&ctx(0.0, 1.5, true, 0.0)));
        assert!(p.decide_sample(&ctx(0.0, -2.0, true, 0.0)));
        assert!(!p.decide_sample(&ctx(0.0, 1.49, true, 0.0)));
        assert!(!p.decide_sample(&ctx(0.0, 9.0, false, 0.0)));
        assert_eq!(p.threshold(), Some(1.5));
        assert!(ThresholdPolicy::new(-0.1).is_err());
        // v = 0 fires whenever idle
        let z = ThresholdPolicy::new(0.0).unwrap();
        assert!(z.decide_sample(&ctx(0.0, 0.0, true, 0.0)));
    }

    #[test]
    fn zero_wait_fires_exactly_when_idle() {
        let p = ZeroWaitPolicy;
        assert!(p.decide_sample(&ctx(0.0, 0.0, true, 0.0)));
        assert!(!p.decide_sample(&ctx(0.0, 5.0, false, 0.0)));
        assert_eq!(p.threshold(), None);
    }

    #[test]
    fn periodic_schedules_from_last_sample() {
        let p = PeriodicPolicy::new(2.0).unwrap();
        assert!(!p.decide_sample(&ctx(1.9, 0.0, true, 0.0)));
        assert!(p.decide_sample(&ctx(2.0, 0.0, true, 0.0)));
        // deferred while busy, fires at the first idle epoch after due time
        assert!(!p.decide_sample(&ctx(2.5, 0.0, false, 0.0)));
        assert!(p.decide_sample(&ctx(2.5, 0.0, true, 0.0)));
        assert!(PeriodicPolicy::new(0.0).is_err());
    }

    #[test]
    fn threshold_map_frozen_values() {
        // stable: theta=0.5, sigma=1, constant unit service, beta=0.8
        let p = OuParams::new(0.5, 0.0, 1.0).unwrap();
        let mse_y = 0.632120558828557678;
        let v = threshold_v(0.8, &p, mse_y).unwrap();
        assert!(
            (v - 1.316809038748754413).abs() < 1e-9,
            "stable threshold {v}"
        );
        // driftless: beta=1.5, mse_y=1 -> sqrt(1.5)
        let w = OuParams::new(0.0, 0.0, 1.0).unwrap();
        let v = threshold_v(1.5, &w, 1.0).unwrap();
        assert!((v - 1.224744871391589049).abs() < 1e-12);
        // unstable: theta=-0.2, beta=2, mse_y=(e^{0.4}-1)/0.4
        let u = OuParams::new(-0.2, 0.0, 1.0).unwrap();
        let v = threshold_v(2.0, &u, 1.229561744103175795).unwrap();
        assert!(
            (v - 1.198497448126043716).abs() < 1e-9,
            "unstable threshold {v}"
        );
    }

    #[test]
    fn threshold_map_boundaries() {
        let p = OuParams::new(0.5, 0.0, 1.0).unwrap();
        let mse_y = 0.632120558828557678;
        // beta at the lower bound: zero threshold
        assert_eq!(threshold_v(mse_y, &p, mse_y).unwrap(), 0.0);
        // beta below the bound or above the ceiling: domain errors
        assert!(threshold_v(0.5, &p, mse_y).is_err());
        assert!(threshold_v(1.0, &p, mse_y).is_err());
        assert!(threshold_v(1.5, &p, mse_y).is_err());
        // unstable regime accepts any beta >= mse_y
        let u = OuParams::new(-0.2, 0.0, 1.0).unwrap();
        assert!(threshold_v(100.0, &u, 1.2295617441).is_ok());
    }

    #[test]
    fn registry_builds_and_reports_unknown() {
        let reg = PolicyRegistry::standard();
        assert_eq!(reg.names(), vec!["periodic", "threshold", "zero-wait"]);
        let p = reg
            .build(
                "threshold",
                &PolicyParams {
                    threshold: Some(2.0),
                    period: None,
                },
            )
            .unwrap();
        assert_eq!(p.name(), "threshold");
        assert_eq!(p.threshold(), Some(2.0));
        assert_eq!(p.describe(), "threshold(v=2)");

        let err = reg.build("nonsense", &PolicyParams::default());
        match err {
            Err(PolicyError::UnknownPolicy { available, .. }) => {
                assert!(available.contains("zero-wait"));
            }
            other => panic!("expected UnknownPolicy, got {other:?}"),
        }
        assert!(matches!(
            reg.build("periodic", &PolicyParams::default()),
            Err(PolicyError::MissingParameter { .. })
        ));
    }

    #[test]
    fn registry_accepts_custom_policies() {
        struct Never;
        impl SamplingPolicy for Never {
            fn name(&self) -> &'static str {
                "never"
            }
            fn decide_sample(&self, _: &SampleContext) -> bool {
                false
            }
        }
        let mut reg = PolicyRegistry::standard();
        reg.register("never", |_| Ok(Box::new(Never)));
        let p = reg.build("never", &PolicyParams::default()).unwrap();
        assert!(!p.decide_sample(&ctx(0.0, 100.0, true, 0.0)));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // A higher MSE target always allows a wider threshold.
            #[test]
            fn threshold_monotone_in_beta_stable(
                b1 in 0.64f64..0.99, b2 in 0.64f64..0.99
            ) {
                let p = OuParams::new(0.5, 0.0, 1.0).unwrap();
                let mse_y = 0.632120558828557678;
                let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
                let v_lo = threshold_v(lo, &p, mse_y).unwrap();
                let v_hi = threshold_v(hi, &p, mse_y).unwrap();
                prop_assert!(v_lo <= v_hi + 1e-12);
            }

            #[test]
            fn threshold_monotone_in_beta_unstable(
                b1 in 1.23f64..50.0, b2 in 1.23f64..50.0
            ) {
                let p = OuParams::new(-0.2, 0.0, 1.0).unwrap();
                let mse_y = 1.229561744103175795;
                let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
                let v_lo = threshold_v(lo, &p, mse_y).unwrap();
                let v_hi = threshold_v(hi, &p, mse_y).unwrap();
                prop_assert!(v_lo <= v_hi + 1e-12);
            }
        }
    }
}
