//! Event-driven simulation of sampling cycles.
//!
//! A cycle runs from one delivery to the next. The engine walks a uniform
//! time grid using exact signal transitions, detects threshold crossings at
//! grid points, handles deliveries at their exact (off-grid) times, and
//! accumulates the squared-error integral by trapezoid rule with the
//! pre-delivery value used at each delivery edge (the estimate jumps
//! there).
//!
//! Work is split into fixed-size batches of cycles, one independent
//! random-stream group per batch, processed in parallel but assembled in
//! batch order. The partition depends only on the requested cycle count,
//! so results are byte-identical for any thread count.

use crate::channel::{Channel, ChannelError, NoiseModel, SamplePacket, ServiceModel};
use crate::estimation::reconstruct;
use crate::policy::{SampleContext, SamplingPolicy};
use crate::process::{OuParams, ProcessError, TransitionStep};
use crate::rng::{StreamFactory, StreamPurpose};
use crate::stats::KahanSum;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Grid noise per step is held near threshold/50, so a first crossing is
/// located to a few percent of the band width.
const CROSSING_RESOLUTION: f64 = 50.0;
/// Upper bound on the step as a fraction of the natural time scale.
const DT_CAP_FRACTION: f64 = 0.002;
/// Absolute floor on the step; thresholds so small that they would demand
/// a finer grid are indistinguishable from zero-wait sampling anyway.
const DT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(
        "cycle open since t={cycle_start:.3} exceeded {limit} time units under {policy}; \
         the sampling condition may be unreachable"
    )]
    NonConvergence {
        cycle_start: f64,
        limit: f64,
        policy: String,
    },
    #[error("invalid simulation settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Process(#[from] ProcessError),
}

/// Knobs of the grid simulator, independent of the model under study.
#[derive(Clone, Copy, Debug)]
pub struct SimSettings {
    /// Fixed step size; `None` selects one from the threshold and the
    /// model time scales (see [`resolve_dt`]).
    pub dt_override: Option<f64>,
    /// Completed cycles discarded at the start of every batch.
    pub warmup_cycles: u32,
    /// A cycle older than this aborts the run: the policy is presumed
    /// unable to trigger.
    pub max_cycle_duration: f64,
    /// Cycles per independent batch (the unit of parallelism and of
    /// random-stream assignment).
    pub cycles_per_batch: u32,
    /// Signal value at t = 0; `None` starts at the long-run mean.
    pub initial_value: Option<f64>,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt_override: None,
            warmup_cycles: 5,
            max_cycle_duration: 1e4,
            cycles_per_batch: 250,
            initial_value: None,
        }
    }
}

/// Everything that defines one simulated system.
#[derive(Clone, Copy)]
pub struct Trajectory<'a> {
    pub params: OuParams,
    pub service: ServiceModel,
    /// Measurement noise on reported values; `None` (or zero variances)
    /// consumes no randomness from the noise stream.
    pub noise: Option<NoiseModel>,
    pub policy: &'a dyn SamplingPolicy,
}

/// Per-cycle observables. A cycle spans two consecutive deliveries
/// [D_i, D_{i+1}); its closing sample is the one taken inside it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CycleRecord {
    pub duration: f64,
    /// Integral of the squared remote-estimation error over the cycle.
    pub err_integral: f64,
    /// Integral of e^(-2 theta (t - S_i)) over the cycle, where S_i is the
    /// sampling time anchoring the cycle's estimate; equals `duration` in
    /// the driftless regime. Exact (closed form), not quadrature.
    pub discount_integral: f64,
    /// |signal - mirrored estimate| at the instant the closing sample was
    /// taken; at least the threshold for threshold policies.
    pub error_at_sample: f64,
}

/// Aggregates of one fixed-duration batch (no per-cycle records kept).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonBatch {
    pub err_integral: f64,
    pub duration: f64,
    pub n_cycles: u64,
}

enum StopRule {
    Cycles(u32),
    Duration(f64),
}

/// Step size for a run: the override if given, else the threshold-crossing
/// rule sigma^2 dt = (v/50)^2 clamped into [1e-6, 0.002 * tau] with tau the
/// faster of the mean service time and the reversion time 1/(2|theta|).
pub fn resolve_dt(
    policy: &dyn SamplingPolicy,
    params: &OuParams,
    service: &ServiceModel,
    settings: &SimSettings,
) -> Result<f64, SimError> {
    if let Some(dt) = settings.dt_override {
        if dt > 0.0 && dt.is_finite() {
            return Ok(dt);
        }
        return Err(SimError::InvalidSettings(format!(
            "dt override must be positive and finite, got {dt}"
        )));
    }
    let tau = if params.is_wiener() {
        service.mean()
    } else {
        service.mean().min(1.0 / (2.0 * params.theta.abs()))
    };
    let cap = (DT_CAP_FRACTION * tau).max(DT_FLOOR);
    Ok(match policy.threshold() {
        Some(v) if v > 0.0 => {
            let fine = (v / (CROSSING_RESOLUTION * params.sigma)).powi(2);
            fine.clamp(DT_FLOOR, cap)
        }
        _ => cap,
    })
}

/// Simulate `n_cycles` post-warmup cycles and return their records in
/// deterministic batch order.
pub fn run_cycle_batches(
    traj: &Trajectory,
    settings: &SimSettings,
    n_cycles: u64,
    factory: StreamFactory,
) -> Result<Vec<CycleRecord>, SimError> {
    if n_cycles == 0 {
        return Ok(Vec::new());
    }
    let dt = resolve_dt(traj.policy, &traj.params, &traj.service, settings)?;
    let per = settings.cycles_per_batch.max(1) as u64;
    let n_batches = n_cycles.div_ceil(per);
    let sizes: Vec<u32> = (0..n_batches)
        .map(|b| (n_cycles - b * per).min(per) as u32)
        .collect();
    let outs: Result<Vec<BatchOutput>, SimError> = sizes
        .par_iter()
        .enumerate()
        .map(|(b, &size)| {
            run_batch(
                traj,
                settings,
                dt,
                StopRule::Cycles(size),
                &factory,
                b as u64,
                true,
            )
        })
        .collect();
    let mut records = Vec::with_capacity(n_cycles as usize);
    for out in outs? {
        records.extend(out.records);
    }
    Ok(records)
}

/// Simulate `n_batches` independent stretches of at least `batch_duration`
/// post-warmup time each (each ends at the first cycle boundary past the
/// target), returning per-batch aggregates in deterministic order.
pub fn run_horizon_batches(
    traj: &Trajectory,
    settings: &SimSettings,
    batch_duration: f64,
    n_batches: u32,
    factory: StreamFactory,
) -> Result<Vec<HorizonBatch>, SimError> {
    if !(batch_duration > 0.0 && batch_duration.is_finite()) {
        return Err(SimError::InvalidSettings(format!(
            "batch duration must be positive and finite, got {batch_duration}"
        )));
    }
    let dt = resolve_dt(traj.policy, &traj.params, &traj.service, settings)?;
    let outs: Result<Vec<BatchOutput>, SimError> = (0..n_batches as u64)
        .into_par_iter()
        .map(|b| {
            run_batch(
                traj,
                settings,
                dt,
                StopRule::Duration(batch_duration),
                &factory,
                b,
                false,
            )
        })
        .collect();
    Ok(outs?
        .into_iter()
        .map(|o| HorizonBatch {
            err_integral: o.err_sum,
            duration: o.dur_sum,
            n_cycles: o.n_cycles,
        })
        .collect())
}

struct BatchOutput {
    records: Vec<CycleRecord>,
    err_sum: f64,
    dur_sum: f64,
    n_cycles: u64,
}

struct OpenCycle {
    start: f64,
    sample_time: f64,
}

/// Exact integral of e^(-2 theta (t - sample_time)) over [start, end].
fn discount_integral(params: &OuParams, sample_time: f64, start: f64, end: f64) -> f64 {
    if params.is_wiener() {
        return end - start;
    }
    // For theta < 0 the integrand grows; values can become very large for
    // long cycles but stay finite under the max-cycle-duration guard.
    let th2 = 2.0 * params.theta;
    ((-th2 * (start - sample_time)).exp() - (-th2 * (end - sample_time)).exp()) / th2
}

fn take_sample(
    t: f64,
    x: f64,
    mirror_estimate: f64,
    traj: &Trajectory,
    channel: &mut Channel,
    service_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
) -> Result<(SamplePacket, f64), SimError> {
    let reported = match &traj.noise {
        Some(n) if !n.is_noiseless() => n.corrupt(x, noise_rng),
        _ => x,
    };
    let y = traj.service.draw(service_rng);
    let packet = channel.submit(t, x, reported, y)?;
    Ok((packet, (x - mirror_estimate).abs()))
}

fn run_batch(
    traj: &Trajectory,
    settings: &SimSettings,
    dt: f64,
    stop: StopRule,
    factory: &StreamFactory,
    batch_index: u64,
    collect: bool,
) -> Result<BatchOutput, SimError> {
    let params = &traj.params;
    let mut signal_rng = factory.stream(batch_index, StreamPurpose::Signal);
    let mut service_rng = factory.stream(batch_index, StreamPurpose::Service);
    let mut noise_rng = factory.stream(batch_index, StreamPurpose::Noise);

    let step = TransitionStep::new(params, dt)?;
    let x0 = settings.initial_value.unwrap_or(params.mu);

    let mut x = x0;
    // Value of the remote estimate and of the sampler's noise-free mirror
    // at the current cursor; both evolve by the deterministic flow and
    // jump at deliveries.
    let mut xhat_remote = x0;
    let mut xhat_mirror = x0;
    let mut channel = Channel::new();
    let mut last_sample_time = 0.0;
    let mut pending_fire_error;

    // Bootstrap sample at t = 0; the stretch up to its delivery precedes
    // the first cycle and is never recorded.
    let mut pending: Option<SamplePacket> = {
        let (p, fe) = take_sample(
            0.0,
            x,
            xhat_mirror,
            traj,
            &mut channel,
            &mut service_rng,
            &mut noise_rng,
        )?;
        pending_fire_error = fe;
        Some(p)
    };

    let mut cycle: Option<OpenCycle> = None;
    let mut err_acc = KahanSum::new();
    let mut e2_prev = 0.0;
    let mut completed: u64 = 0;
    let mut recorded: u64 = 0;
    let mut err_sum = KahanSum::new();
    let mut dur_sum = KahanSum::new();
    let mut records = Vec::new();
    if collect {
        if let StopRule::Cycles(n) = stop {
            records.reserve(n as usize);
        }
    }

    let mut t_cur = 0.0;
    let mut k: u64 = 0;
    'grid: loop {
        k += 1;
        let t_next = k as f64 * dt;

        // Deliveries inside (t_cur, t_next]; a fresh sample taken at a
        // delivery can itself deliver before t_next, hence the loop.
        while let Some(p) = pending {
            if p.delivery_time > t_next {
                break;
            }
            let d = p.delivery_time;
            let delta = d - t_cur;
            if delta > 0.0 {
                let sub = TransitionStep::new(params, delta)?;
                x = sub.advance(x, &mut signal_rng);
                xhat_remote = sub.flow(xhat_remote);
                xhat_mirror = sub.flow(xhat_mirror);
                let e = x - xhat_remote;
                err_acc.add(0.5 * (e2_prev + e * e) * delta);
                e2_prev = e * e;
                t_cur = d;
            }

            if let Some(c) = cycle.take() {
                let record = CycleRecord {
                    duration: d - c.start,
                    err_integral: err_acc.value(),
                    discount_integral: discount_integral(params, c.sample_time, c.start, d),
                    error_at_sample: pending_fire_error,
                };
                completed += 1;
                if completed > settings.warmup_cycles as u64 {
                    recorded += 1;
                    err_sum.add(record.err_integral);
                    dur_sum.add(record.duration);
                    if collect {
                        records.push(record);
                    }
                }
            }

            // The estimate jumps onto the delivered sample's decay curve.
            xhat_remote = reconstruct(params, p.submit_time, p.reported_value, d);
            xhat_mirror = reconstruct(params, p.submit_time, p.signal_value, d);
            let e = x - xhat_remote;
            e2_prev = e * e;
            err_acc = KahanSum::new();
            cycle = Some(OpenCycle {
                start: d,
                sample_time: p.submit_time,
            });
            pending = None;

            let done = match stop {
                StopRule::Cycles(n) => recorded >= n as u64,
                StopRule::Duration(t) => recorded > 0 && dur_sum.value() >= t,
            };
            if done {
                break 'grid;
            }

            // Channel just went idle; the policy may sample immediately
            // (threshold policies do when the delivery-age gap is already
            // out of band).
            let ctx = SampleContext {
                t: d,
                signal: x,
                estimate: xhat_mirror,
                channel_idle: true,
                last_sample_time,
            };
            if traj.policy.decide_sample(&ctx) {
                let (np, fe) = take_sample(
                    d,
                    x,
                    xhat_mirror,
                    traj,
                    &mut channel,
                    &mut service_rng,
                    &mut noise_rng,
                )?;
                pending = Some(np);
                pending_fire_error = fe;
                last_sample_time = d;
            }
        }

        // Remainder of the grid step. When nothing interrupted the step the
        // cursor still sits exactly on the previous grid point and the
        // precomputed coefficients apply bit-for-bit.
        let delta = t_next - t_cur;
        if delta > 0.0 {
            let sub_store;
            let sub = if t_cur == (k - 1) as f64 * dt {
                &step
            } else {
                sub_store = TransitionStep::new(params, delta)?;
                &sub_store
            };
            x = sub.advance(x, &mut signal_rng);
            xhat_remote = sub.flow(xhat_remote);
            xhat_mirror = sub.flow(xhat_mirror);
            let e = x - xhat_remote;
            err_acc.add(0.5 * (e2_prev + e * e) * delta);
            e2_prev = e * e;
            t_cur = t_next;
        }

        if pending.is_none() {
            let ctx = SampleContext {
                t: t_next,
                signal: x,
                estimate: xhat_mirror,
                channel_idle: channel.is_idle(t_next),
                last_sample_time,
            };
            if traj.policy.decide_sample(&ctx) {
                let (np, fe) = take_sample(
                    t_next,
                    x,
                    xhat_mirror,
                    traj,
                    &mut channel,
                    &mut service_rng,
                    &mut noise_rng,
                )?;
                pending = Some(np);
                pending_fire_error = fe;
                last_sample_time = t_next;
            }
        }

        let age_start = match &cycle {
            Some(c) => c.start,
            None => 0.0,
        };
        if t_next - age_start > settings.max_cycle_duration {
            return Err(SimError::NonConvergence {
                cycle_start: age_start,
                limit: settings.max_cycle_duration,
                policy: traj.policy.describe(),
            });
        }
    }

    Ok(BatchOutput {
        records,
        err_sum: err_sum.value(),
        dur_sum: dur_sum.value(),
        n_cycles: recorded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ThresholdPolicy, ZeroWaitPolicy};
    use crate::stats::mean;

    fn wiener() -> OuParams {
        OuParams::new(0.0, 0.0, 1.0).unwrap()
    }

    fn stable() -> OuParams {
        OuParams::new(0.5, 0.0, 1.0).unwrap()
    }

    fn unit_service() -> ServiceModel {
        ServiceModel::Constant { value: 1.0 }
    }

    #[test]
    fn zero_wait_constant_service_cycle_structure() {
        let policy = ZeroWaitPolicy;
        let traj = Trajectory {
            params: wiener(),
            service: unit_service(),
            noise: None,
            policy: &policy,
        };
        let settings = SimSettings::default();
        let recs =
            run_cycle_batches(&traj, &settings, 2000, StreamFactory::new(101)).unwrap();
        assert_eq!(recs.len(), 2000);
        for r in &recs {
            // zero-wait on a constant channel: every cycle is one service
            assert_eq!(r.duration, 1.0);
            // driftless discount weight is the duration itself
            assert_eq!(r.discount_integral, 1.0);
            assert!(r.err_integral >= 0.0);
        }
        // E[cycle error integral] = sigma^2 * integral of age over [1, 2]
        let m = mean(&recs.iter().map(|r| r.err_integral).collect::<Vec<_>>());
        assert!((m - 1.5).abs() < 0.2, "mean cycle error {m}");
    }

    #[test]
    fn threshold_cycles_fire_at_or_beyond_v() {
        let policy = ThresholdPolicy::new(0.8).unwrap();
        let traj = Trajectory {
            params: stable(),
            service: unit_service(),
            noise: None,
            policy: &policy,
        };
        let recs = run_cycle_batches(
            &traj,
            &SimSettings::default(),
            300,
            StreamFactory::new(7),
        )
        .unwrap();
        assert_eq!(recs.len(), 300);
        for r in &recs {
            assert!(
                r.error_at_sample >= 0.8 - 1e-9,
                "fired at {}",
                r.error_at_sample
            );
            assert!(r.duration >= 1.0 - 1e-9, "cycle shorter than the service");
            assert!(
                r.discount_integral > 0.0 && r.discount_integral <= r.duration + 1e-12,
                "discount {} vs duration {}",
                r.discount_integral,
                r.duration
            );
        }
    }

    #[test]
    fn results_identical_across_thread_counts() {
        let policy = ThresholdPolicy::new(0.5).unwrap();
        let traj = Trajectory {
            params: stable(),
            service: ServiceModel::Exponential { mean: 1.0 },
            noise: Some(NoiseModel { b1: 0.05, b2: 0.05 }),
            policy: &policy,
        };
        let settings = SimSettings {
            cycles_per_batch: 50,
            ..SimSettings::default()
        };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    run_cycle_batches(&traj, &settings, 300, StreamFactory::new(99)).unwrap()
                })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_threshold_reports_nonconvergence() {
        // Stationary sd is 1; a threshold of 50 never fires.
        let policy = ThresholdPolicy::new(50.0).unwrap();
        let traj = Trajectory {
            params: stable(),
            service: unit_service(),
            noise: None,
            policy: &policy,
        };
        let settings = SimSettings {
            dt_override: Some(0.01),
            max_cycle_duration: 30.0,
            ..SimSettings::default()
        };
        let err = run_cycle_batches(&traj, &settings, 10, StreamFactory::new(1));
        match err {
            Err(SimError::NonConvergence { limit, policy, .. }) => {
                assert_eq!(limit, 30.0);
                assert!(policy.contains("threshold"));
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn horizon_batches_cover_requested_duration() {
        let policy = ZeroWaitPolicy;
        let traj = Trajectory {
            params: wiener(),
            service: unit_service(),
            noise: None,
            policy: &policy,
        };
        let batches = run_horizon_batches(
            &traj,
            &SimSettings::default(),
            25.0,
            8,
            StreamFactory::new(5),
        )
        .unwrap();
        assert_eq!(batches.len(), 8);
        for b in &batches {
            assert!(b.duration >= 25.0);
            assert_eq!(b.n_cycles, b.duration.round() as u64);
            assert!(b.err_integral > 0.0);
        }
        assert!(run_horizon_batches(&traj, &SimSettings::default(), 0.0, 2, StreamFactory::new(5)).is_err());
    }

    #[test]
    fn dt_resolution_rules() {
        let settings = SimSettings::default();
        let zw = ZeroWaitPolicy;
        // no threshold: capped by the service/reversion time scale
        let dt = resolve_dt(&zw, &stable(), &unit_service(), &settings).unwrap();
        assert!((dt - 0.002).abs() < 1e-15);
        // threshold rule: (v / (50 sigma))^2
        let th = ThresholdPolicy::new(0.5).unwrap();
        let dt = resolve_dt(&th, &stable(), &unit_service(), &settings).unwrap();
        assert!((dt - 1e-4).abs() < 1e-15);
        // tiny thresholds hit the floor
        let th = ThresholdPolicy::new(1e-4).unwrap();
        let dt = resolve_dt(&th, &stable(), &unit_service(), &settings).unwrap();
        assert_eq!(dt, 1e-6);
        // override wins, but must be valid
        let s2 = SimSettings {
            dt_override: Some(0.05),
            ..settings
        };
        assert_eq!(resolve_dt(&zw, &stable(), &unit_service(), &s2).unwrap(), 0.05);
        let bad = SimSettings {
            dt_override: Some(-1.0),
            ..settings
        };
        assert!(resolve_dt(&zw, &stable(), &unit_service(), &bad).is_err());
    }

    #[test]
    fn empty_request_returns_empty() {
        let policy = ZeroWaitPolicy;
        let traj = Trajectory {
            params: wiener(),
            service: unit_service(),
            noise: None,
            policy: &policy,
        };
        let recs =
            run_cycle_batches(&traj, &SimSettings::default(), 0, StreamFactory::new(1)).unwrap();
        assert!(recs.is_empty());
    }
}
