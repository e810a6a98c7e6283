//! Minimum-MSE reconstruction of the signal from delivered samples.
//!
//! Between deliveries the conditional mean of the signal given the last
//! delivered sample value relaxes toward the long-run mean along the
//! deterministic flow; that conditional mean is the optimal estimate
//! because sampling decisions here never leak information about the
//! signal path beyond the delivered values themselves.

use crate::channel::SamplePacket;
use crate::process::OuParams;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("estimator state is ahead of the query: {what} at t={t}, anchor at {anchor_time}")]
    StaleState {
        what: &'static str,
        t: f64,
        anchor_time: f64,
    },
}

/// Conditional mean of the signal at time `t` given value `anchor_value`
/// observed at `anchor_time` <= t: mu + (value - mu) e^(-theta (t - s)).
pub fn reconstruct(params: &OuParams, anchor_time: f64, anchor_value: f64, t: f64) -> f64 {
    if params.is_wiener() {
        anchor_value
    } else {
        params.mu + (anchor_value - params.mu) * (-params.theta * (t - anchor_time)).exp()
    }
}

/// Which value of a delivered packet anchors the reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AnchorValue {
    /// The received (possibly noise-corrupted) value: the remote estimator.
    Reported,
    /// The true signal value: the sampler's local replica of the remote
    /// estimate, available because the sampler knows what it measured.
    Signal,
}

/// Remote estimate as a function of time, fed by delivered packets.
#[derive(Clone, Debug)]
pub struct EstimatorState {
    params: OuParams,
    /// Prior anchor used before the first delivery: value at time 0.
    prior: f64,
    last: Option<SamplePacket>,
    source: AnchorValue,
}

impl EstimatorState {
    /// The actual remote estimator: anchors on received values.
    pub fn remote(params: OuParams, prior: f64) -> Self {
        Self {
            params,
            prior,
            last: None,
            source: AnchorValue::Reported,
        }
    }

    /// The sampler's noise-free mirror of the remote estimate, used by
    /// sampling policies (the sampler cannot observe the channel noise, so
    /// its decisions are functions of true sample values only).
    pub fn sampler_mirror(params: OuParams, prior: f64) -> Self {
        Self {
            params,
            prior,
            last: None,
            source: AnchorValue::Signal,
        }
    }

    pub fn anchor(&self) -> Option<&SamplePacket> {
        self.last.as_ref()
    }

    /// Ingest a delivered packet. Deliveries must arrive in time order.
    pub fn observe(&mut self, packet: SamplePacket) -> Result<(), EstimationError> {
        if let Some(prev) = &self.last {
            if packet.delivery_time < prev.delivery_time {
                return Err(EstimationError::StaleState {
                    what: "observe",
                    t: packet.delivery_time,
                    anchor_time: prev.delivery_time,
                });
            }
        }
        self.last = Some(packet);
        Ok(())
    }

    /// Estimate at time `t`, which must not precede the anchoring event.
    pub fn estimate(&self, t: f64) -> Result<f64, EstimationError> {
        match &self.last {
            None => {
                if t < 0.0 {
                    return Err(EstimationError::StaleState {
                        what: "estimate",
                        t,
                        anchor_time: 0.0,
                    });
                }
                Ok(reconstruct(&self.params, 0.0, self.prior, t))
            }
            Some(p) => {
                if t < p.delivery_time {
                    return Err(EstimationError::StaleState {
                        what: "estimate",
                        t,
                        anchor_time: p.delivery_time,
                    });
                }
                let value = match self.source {
                    AnchorValue::Reported => p.reported_value,
                    AnchorValue::Signal => p.signal_value,
                };
                Ok(reconstruct(&self.params, p.submit_time, value, t))
            }
        }
    }
}

/// Trapezoid integral of the squared estimation error along a sampled path.
/// `times` must be nondecreasing; the three slices must have equal length.
pub fn error_path_integral(times: &[f64], signal: &[f64], estimate: &[f64]) -> f64 {
    assert_eq!(times.len(), signal.len());
    assert_eq!(times.len(), estimate.len());
    let mut acc = crate::stats::KahanSum::new();
    for i in 1..times.len() {
        let e0 = signal[i - 1] - estimate[i - 1];
        let e1 = signal[i] - estimate[i];
        acc.add(0.5 * (e0 * e0 + e1 * e1) * (times[i] - times[i - 1]));
    }
    acc.value()
}
