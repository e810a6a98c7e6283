//! Service-time models, measurement noise, and the first-come-first-serve
//! reporting channel.
//!
//! The channel serves one packet at a time: a sample submitted at `s` while
//! a previous packet is still in flight starts service only at that
//! packet's delivery, so delivery times obey
//! `D_next = max(S_next, D_prev) + Y_next`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("submissions must be in time order: got {submit_time} after {last_submit_time}")]
    OrderViolation {
        submit_time: f64,
        last_submit_time: f64,
    },
    #[error("invalid {what}: {why}")]
    InvalidModel { what: &'static str, why: String },
}

/// Distribution of the per-packet service (transmission) time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ServiceModel {
    /// Degenerate service: every packet takes exactly `value`.
    Constant { value: f64 },
    Exponential { mean: f64 },
    Gamma { shape: f64, scale: f64 },
    /// Y = exp(alpha Z - alpha^2/2) with Z standard normal; the shift keeps
    /// E[Y] = 1 for every alpha, so alpha tunes dispersion at fixed load.
    LogNormalNormalized { alpha: f64 },
}

impl ServiceModel {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let ok = match *self {
            ServiceModel::Constant { value } => value > 0.0 && value.is_finite(),
            ServiceModel::Exponential { mean } => mean > 0.0 && mean.is_finite(),
            ServiceModel::Gamma { shape, scale } => {
                shape > 0.0 && shape.is_finite() && scale > 0.0 && scale.is_finite()
            }
            ServiceModel::LogNormalNormalized { alpha } => alpha > 0.0 && alpha.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(ChannelError::InvalidModel {
                what: "service model",
                why: format!("parameters must be positive and finite: {self:?}"),
            })
        }
    }

    /// One service-time draw. Callers must have validated the model.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ServiceModel::Constant { value } => value,
            ServiceModel::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("validated").sample(rng)
            }
            ServiceModel::Gamma { shape, scale } => {
                Gamma::new(shape, scale).expect("validated").sample(rng)
            }
            ServiceModel::LogNormalNormalized { alpha } => {
                let z: f64 = rng.sample(StandardNormal);
                (alpha * z - alpha * alpha / 2.0).exp()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ServiceModel::Constant { value } => value,
            ServiceModel::Exponential { mean } => mean,
            ServiceModel::Gamma { shape, scale } => shape * scale,
            ServiceModel::LogNormalNormalized { .. } => 1.0,
        }
    }

    /// E[e^(-2 theta Y)] where available in closed form. `None` means no
    /// closed form (log-normal with drift) or a divergent expectation
    /// (theta negative enough that the exponential moment blows up).
    pub fn exp_neg_two_theta_moment(&self, theta: f64) -> Option<f64> {
        match *self {
            ServiceModel::Constant { value } => Some((-2.0 * theta * value).exp()),
            ServiceModel::Exponential { mean } => {
                let d = 1.0 + 2.0 * theta * mean;
                (d > 0.0).then(|| 1.0 / d)
            }
            ServiceModel::Gamma { shape, scale } => {
                let d = 1.0 + 2.0 * theta * scale;
                (d > 0.0).then(|| d.powf(-shape))
            }
            ServiceModel::LogNormalNormalized { .. } => None,
        }
    }
}

/// Additive measurement noise on reported sample values. `b1` and `b2` are
/// the variances of the two independent zero-mean Gaussian terms (sensor
/// and quantization); only their sum enters the corrupted value's law.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    #[serde(default)]
    pub b1: f64,
    #[serde(default)]
    pub b2: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.b1 >= 0.0 && self.b1.is_finite() && self.b2 >= 0.0 && self.b2.is_finite() {
            Ok(())
        } else {
            Err(ChannelError::InvalidModel {
                what: "noise model",
                why: format!("variances must be nonnegative and finite: {self:?}"),
            })
        }
    }

    pub fn total_variance(&self) -> f64 {
        self.b1 + self.b2
    }

    pub fn is_noiseless(&self) -> bool {
        self.total_variance() == 0.0
    }

    /// Reported value for a true sample `x`: the sum of two independent
    /// Gaussians is drawn as one with the combined variance.
    pub fn corrupt<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        x + self.total_variance().sqrt() * z
    }
}

/// One sample in (or through) the channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePacket {
    pub submit_time: f64,
    /// True signal value at the sampling instant.
    pub signal_value: f64,
    /// Value the estimator will receive (equals `signal_value` when
    /// sampling is noiseless).
    pub reported_value: f64,
    pub service_time: f64,
    pub delivery_time: f64,
}

/// First-come-first-serve single-server channel state.
#[derive(Clone, Debug)]
pub struct Channel {
    busy_until: f64,
    last_submit_time: f64,
}

impl Channel {
    pub fn new() -> Self {
        Self {
            busy_until: 0.0,
            last_submit_time: f64::NEG_INFINITY,
        }
    }

    /// Accepts a sample taken at `submit_time` and returns the packet with
    /// its delivery time filled in. Submissions must be time-ordered.
    pub fn submit(
        &mut self,
        submit_time: f64,
        signal_value: f64,
        reported_value: f64,
        service_time: f64,
    ) -> Result<SamplePacket, ChannelError> {
        if submit_time < self.last_submit_time {
            return Err(ChannelError::OrderViolation {
                submit_time,
                last_submit_time: self.last_submit_time,
            });
        }
        if !(service_time > 0.0 && service_time.is_finite()) {
            return Err(ChannelError::InvalidModel {
                what: "service time",
                why: format!("must be positive and finite, got {service_time}"),
            });
        }
        let delivery_time = submit_time.max(self.busy_until) + service_time;
        self.busy_until = delivery_time;
        self.last_submit_time = submit_time;
        Ok(SamplePacket {
            submit_time,
            signal_value,
            reported_value,
            service_time,
            delivery_time,
        })
    }

    /// True when no packet is in flight at time `t`.
    pub fn is_idle(&self, t: f64) -> bool {
        t >= self.busy_until
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }
}

impl Default for Channel {
    fn default() -> Self {
        Self::new()
    }
}
