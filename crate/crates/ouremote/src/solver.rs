//! Fixed-point search for the optimal long-run MSE.
//!
//! The optimal threshold policy satisfies a self-consistency condition: at
//! the right target MSE `beta`, simulating the threshold policy built for
//! `beta` yields cycles whose mean error integral equals `beta` times the
//! mean cycle duration. The residual
//!
//! ```text
//! r(beta) = E[cycle error integral] - beta * E[cycle duration]
//! ```
//!
//! is strictly decreasing in `beta` (a higher target widens the threshold,
//! and the per-cycle surplus falls), so the root is found by bisection.
//! Every residual evaluation within a search stage reuses the same random
//! streams (common random numbers), which makes `r` a deterministic,
//! near-monotone function of `beta` and lets a coarse stage hand a tight
//! bracket to a heavier one.

use crate::channel::ServiceModel;
use crate::policy::{threshold_v, PolicyError, SamplingPolicy, ThresholdPolicy};
use crate::process::{mse_lower_bound, OuParams, Regime};
use crate::rng::{StreamFactory, StreamPurpose};
use crate::sim::{run_cycle_batches, CycleRecord, SimError, SimSettings, Trajectory};
use crate::stats::{mean, ratio_with_jackknife_se, standard_error};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("bracketing the fixed point failed: {detail}")]
    BracketFailure { detail: String },
    #[error("residual not decreasing in the target MSE beyond noise:\n{detail}")]
    NonMonotoneResidual { detail: String },
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Sample sizes and tolerances of the staged search.
#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Relative width of the final beta bracket.
    pub tol_rel: f64,
    /// Cycles per residual evaluation in the coarse stage.
    pub n_search: u32,
    /// Cycles per residual evaluation in the refining stage.
    pub n_refine: u32,
    /// Cycles of the fresh-stream validation run(s).
    pub n_validate: u32,
    /// Service draws for the Monte Carlo lower bound (closed forms are
    /// used when available and ignore this).
    pub mse_y_draws: u64,
    /// Fixed-point polish rounds allowed after validation.
    pub max_polish_rounds: u32,
    pub sim: SimSettings,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_rel: 5e-3,
            n_search: 2_000,
            n_refine: 20_000,
            n_validate: 20_000,
            mse_y_draws: 1_000_000,
            max_polish_rounds: 2,
            sim: SimSettings::default(),
        }
    }
}

/// Solved operating point of the optimal threshold policy.
#[derive(Clone, Debug)]
pub struct PolicySolution {
    /// Optimal long-run MSE (the fixed point).
    pub beta: f64,
    /// Threshold attaining it.
    pub v: f64,
    /// Best achievable MSE over all policies (lower bound).
    pub mse_y: f64,
    /// Validation residual at `beta` and its standard error; statistically
    /// zero when the search succeeded.
    pub residual: f64,
    pub residual_se: f64,
    /// Long-run MSE measured on the validation cycles.
    pub mse: f64,
    /// Two jackknife standard errors of `mse`.
    pub ci_halfwidth: f64,
    /// Total cycles simulated across all stages.
    pub n_cycles: u64,
    pub warnings: Vec<String>,
}

/// Simulate `n_cycles` noiseless cycles under `policy`.
pub fn simulate_cycles(
    policy: &dyn SamplingPolicy,
    params: &OuParams,
    service: &ServiceModel,
    n_cycles: u64,
    settings: &SimSettings,
    factory: StreamFactory,
) -> Result<Vec<CycleRecord>, SimError> {
    let traj = Trajectory {
        params: *params,
        service: *service,
        noise: None,
        policy,
    };
    run_cycle_batches(&traj, settings, n_cycles, factory)
}

/// Mean and standard error of the per-cycle residual
/// `err_integral - beta * duration`.
pub fn beta_residual(beta: f64, cycles: &[CycleRecord]) -> (f64, f64) {
    let vals: Vec<f64> = cycles
        .iter()
        .map(|c| c.err_integral - beta * c.duration)
        .collect();
    (mean(&vals), standard_error(&vals))
}

/// [`solve_beta_with`] under default sample sizes.
pub fn solve_beta(
    params: &OuParams,
    service: &ServiceModel,
    tol_rel: f64,
    seed: u64,
) -> Result<PolicySolution, SolverError> {
    let opts = SolverOptions {
        tol_rel,
        ..SolverOptions::default()
    };
    solve_beta_with(params, service, &opts, StreamFactory::new(seed))
}

#[derive(Clone, Copy, Debug)]
struct PathPoint {
    stage: u8,
    beta: f64,
    residual: f64,
    se: f64,
}

/// Within each common-random-number stage the residual must be decreasing
/// in beta up to sampling noise (3 combined standard errors of slack).
fn check_monotone(path: &[PathPoint]) -> Result<(), String> {
    for a in path {
        for b in path {
            if a.stage == b.stage && a.beta < b.beta {
                let slack = 3.0 * (a.se + b.se);
                if a.residual < b.residual - slack {
                    let mut dump = format!(
                        "r({:.6}) = {:.3e} (se {:.1e}) < r({:.6}) = {:.3e} (se {:.1e}) in stage {}\nsearch path:\n",
                        a.beta, a.residual, a.se, b.beta, b.residual, b.se, a.stage
                    );
                    for p in path {
                        dump.push_str(&format!(
                            "  stage {} beta {:.8} residual {:+.6e} se {:.2e}\n",
                            p.stage, p.beta, p.residual, p.se
                        ));
                    }
                    return Err(dump);
                }
            }
        }
    }
    Ok(())
}

struct Search<'a> {
    params: &'a OuParams,
    service: &'a ServiceModel,
    opts: &'a SolverOptions,
    factory: StreamFactory,
    mse_y: f64,
    path: Vec<PathPoint>,
    total_cycles: u64,
}

impl Search<'_> {
    /// Residual at `beta` using the shared streams of `stage`.
    fn residual_at(&mut self, stage: u8, beta: f64, n: u32) -> Result<(f64, f64), SolverError> {
        let v = threshold_v(beta, self.params, self.mse_y)?;
        let policy = ThresholdPolicy::new(v)?;
        let cycles = simulate_cycles(
            &policy,
            self.params,
            self.service,
            n as u64,
            &self.opts.sim,
            self.factory.child(stage as u64),
        )?;
        self.total_cycles += cycles.len() as u64;
        let (r, se) = beta_residual(beta, &cycles);
        self.path.push(PathPoint {
            stage,
            beta,
            residual: r,
            se,
        });
        Ok((r, se))
    }
}

const STAGE_SEARCH: u8 = 1;
const STAGE_REFINE: u8 = 2;
/// Validation rounds use children 10, 11, ... to stay clear of the stages.
const VALIDATE_CHILD_BASE: u64 = 10;

pub fn solve_beta_with(
    params: &OuParams,
    service: &ServiceModel,
    opts: &SolverOptions,
    factory: StreamFactory,
) -> Result<PolicySolution, SolverError> {
    if !(opts.tol_rel > 0.0 && opts.tol_rel <= 0.5) {
        return Err(SolverError::InvalidOptions(format!(
            "tol_rel must lie in (0, 0.5], got {}",
            opts.tol_rel
        )));
    }
    if opts.n_search == 0 || opts.n_refine == 0 || opts.n_validate == 0 {
        return Err(SolverError::InvalidOptions(
            "cycle counts must be positive".to_string(),
        ));
    }
    let mut warnings = Vec::new();

    let mse_y = mse_lower_bound(
        service,
        params,
        opts.mse_y_draws,
        &mut factory.child(0).stream(0, StreamPurpose::Aux),
    );

    let mut search = Search {
        params,
        service,
        opts,
        factory,
        mse_y,
        path: Vec::new(),
        total_cycles: 0,
    };

    // Upper end of admissible targets: just under the no-sampling ceiling
    // for mean-reverting signals, found by doubling otherwise.
    let mut lo = mse_y;
    let (r_lo, se_lo) = search.residual_at(STAGE_SEARCH, lo, opts.n_search)?;
    if r_lo <= 0.0 {
        return Err(SolverError::BracketFailure {
            detail: format!(
                "residual at the lower bound beta = {lo:.6} is {r_lo:.3e} (se {se_lo:.1e}); \
                 expected positive. The zero-threshold policy already meets the bound, \
                 which indicates a degenerate configuration."
            ),
        });
    }
    let mut hi;
    let beta_cap = match params.regime() {
        Regime::Stable => {
            let m = params.stationary_variance().expect("stable");
            let cap = m - 1e-6 * (m - mse_y);
            if cap <= lo {
                return Err(SolverError::BracketFailure {
                    detail: format!(
                        "admissible range [{lo:.6e}, {cap:.6e}] is empty: the lower bound \
                         nearly reaches the no-sampling ceiling {m:.6e}"
                    ),
                });
            }
            hi = cap;
            let (r_hi, se_hi) = search.residual_at(STAGE_SEARCH, hi, opts.n_search)?;
            if r_hi >= 0.0 {
                return Err(SolverError::BracketFailure {
                    detail: format!(
                        "residual at the ceiling beta = {hi:.6} is {r_hi:.3e} (se {se_hi:.1e}); \
                         expected negative"
                    ),
                });
            }
            Some(cap)
        }
        Regime::Wiener | Regime::Unstable => {
            let mut delta = mse_y.max(1e-12);
            let mut doublings = 0u32;
            loop {
                hi = mse_y + delta;
                let (r_hi, _) = search.residual_at(STAGE_SEARCH, hi, opts.n_search)?;
                if r_hi < 0.0 {
                    break;
                }
                lo = hi;
                delta *= 2.0;
                doublings += 1;
                if doublings > 60 {
                    return Err(SolverError::BracketFailure {
                        detail: format!(
                            "residual still positive after {doublings} doublings \
                             (beta = {hi:.3e}); the fixed point appears unbounded"
                        ),
                    });
                }
            }
            if doublings > 20 {
                warnings.push(format!(
                    "upper bracket needed {doublings} doublings; the configuration may be \
                     close to unstable growth"
                ));
            }
            None
        }
    };

    // Coarse stage narrows to 8x the final tolerance, the refining stage
    // (heavier sampling, fresh common streams) finishes the job.
    for (stage, n, width_factor) in [
        (STAGE_SEARCH, opts.n_search, 8.0),
        (STAGE_REFINE, opts.n_refine, 1.0),
    ] {
        let mut iter = 0;
        while hi - lo > width_factor * opts.tol_rel * 0.5 * (hi + lo) {
            let mid = 0.5 * (lo + hi);
            let (r, _) = search.residual_at(stage, mid, n)?;
            if r > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            iter += 1;
            if iter > 64 {
                break; // bracket cannot shrink further in f64
            }
        }
    }

    if let Err(detail) = check_monotone(&search.path) {
        return Err(SolverError::NonMonotoneResidual { detail });
    }

    // Fresh-stream validation at the bisection answer; a statistically
    // nonzero residual triggers fixed-point polish rounds beta <- mse.
    let mut beta = 0.5 * (lo + hi);
    let mut round = 0u32;
    loop {
        let v = threshold_v(beta, params, mse_y)?;
        let policy = ThresholdPolicy::new(v)?;
        let cycles = simulate_cycles(
            &policy,
            params,
            service,
            opts.n_validate as u64,
            &opts.sim,
            search.factory.child(VALIDATE_CHILD_BASE + round as u64),
        )?;
        search.total_cycles += cycles.len() as u64;
        let (r, r_se) = beta_residual(beta, &cycles);
        let err: Vec<f64> = cycles.iter().map(|c| c.err_integral).collect();
        let dur: Vec<f64> = cycles.iter().map(|c| c.duration).collect();
        let (mse, mse_se) = ratio_with_jackknife_se(&err, &dur);

        if r.abs() <= 2.0 * r_se || round >= opts.max_polish_rounds {
            if r.abs() > 3.0 * r_se {
                warnings.push(format!(
                    "validation residual {r:.3e} exceeds 3 standard errors ({:.1e}) after \
                     {round} polish round(s); beta may carry a small bias",
                    r_se
                ));
            }
            return Ok(PolicySolution {
                beta,
                v,
                mse_y,
                residual: r,
                residual_se: r_se,
                mse,
                ci_halfwidth: 2.0 * mse_se,
                n_cycles: search.total_cycles,
                warnings,
            });
        }
        // Step toward the fixed point, staying inside the admissible range.
        let mut next = mse;
        if let Some(cap) = beta_cap {
            next = next.min(cap);
        }
        beta = next.max(mse_y);
        round += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_zero_at_the_pooled_ratio() {
        let cycles = vec![
            CycleRecord {
                duration: 1.0,
                err_integral: 2.0,
                discount_integral: 1.0,
                error_at_sample: 0.0,
            },
            CycleRecord {
                duration: 3.0,
                err_integral: 4.0,
                discount_integral: 2.0,
                error_at_sample: 0.0,
            },
        ];
        // pooled ratio = 6/4
        let (r, se) = beta_residual(1.5, &cycles);
        assert!(r.abs() < 1e-15);
        assert!(se > 0.0);
        // away from the ratio the residual has the right sign
        let (r, _) = beta_residual(1.0, &cycles);
        assert!(r > 0.0);
        let (r, _) = beta_residual(2.0, &cycles);
        assert!(r < 0.0);
    }

    #[test]
    fn monotone_checker_flags_significant_increase() {
        let ok = vec![
            PathPoint {
                stage: 1,
                beta: 0.7,
                residual: 0.5,
                se: 0.01,
            },
            PathPoint {
                stage: 1,
                beta: 0.9,
                residual: -0.2,
                se: 0.01,
            },
        ];
        assert!(check_monotone(&ok).is_ok());

        let noisy_but_fine = vec![
            PathPoint {
                stage: 1,
                beta: 0.7,
                residual: 0.10,
                se: 0.05,
            },
            PathPoint {
                stage: 1,
                beta: 0.9,
                residual: 0.15,
                se: 0.05,
            },
        ];
        assert!(check_monotone(&noisy_but_fine).is_ok());

        let violating = vec![
            PathPoint {
                stage: 1,
                beta: 0.7,
                residual: 0.1,
                se: 0.001,
            },
            PathPoint {
                stage: 1,
                beta: 0.9,
                residual: 0.7,
                se: 0.001,
            },
        ];
        assert!(check_monotone(&violating).is_err());

        // different stages are never compared
        let cross_stage = vec![
            PathPoint {
                stage: 1,
                beta: 0.7,
                residual: 0.1,
                se: 0.001,
            },
            PathPoint {
                stage: 2,
                beta: 0.9,
                residual: 0.7,
                se: 0.001,
            },
        ];
        assert!(check_monotone(&cross_stage).is_ok());
    }

    #[test]
    fn options_validated() {
        let p = OuParams::new(0.5, 0.0, 1.0).unwrap();
        let s = ServiceModel::Constant { value: 1.0 };
        let bad = SolverOptions {
            tol_rel: 0.0,
            ..SolverOptions::default()
        };
        assert!(matches!(
            solve_beta_with(&p, &s, &bad, StreamFactory::new(1)),
            Err(SolverError::InvalidOptions(_))
        ));
    }

    #[test]
    fn quick_solve_lands_between_bounds() {
        // Deliberately small sample sizes: this is a smoke test of the
        // plumbing, not of accuracy (the acceptance suite covers that).
        let p = OuParams::new(0.5, 0.0, 1.0).unwrap();
        let s = ServiceModel::Constant { value: 1.0 };
        let opts = SolverOptions {
            n_search: 300,
            n_refine: 800,
            n_validate: 800,
            tol_rel: 2e-2,
            sim: SimSettings {
                dt_override: Some(2e-3),
                ..SimSettings::default()
            },
            ..SolverOptions::default()
        };
        let sol = solve_beta_with(&p, &s, &opts, StreamFactory::new(2024)).unwrap();
        let mse_y = 0.632120558828557678;
        assert!((sol.mse_y - mse_y).abs() < 1e-12);
        assert!(sol.beta > mse_y && sol.beta < 1.0, "beta = {}", sol.beta);
        assert!(sol.v > 0.0);
        assert!(sol.n_cycles > 0);
        assert!(sol.residual.abs() < 0.2, "residual {}", sol.residual);
    }
}
