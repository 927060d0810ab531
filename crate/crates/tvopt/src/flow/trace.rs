//! Continuation of a local-minimum branch across time by warm-started
//! refinement on a time grid.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Result, TvError};
use crate::flow::kkt::local_minimum_refine;
use crate::problem::{MinTrajectory, ProblemDefinition};

#[derive(Debug, Clone)]
pub struct TraceOptions {
    /// Label attached to the traced trajectory.
    pub label: String,
    /// Stationarity tolerance of each refinement.
    pub refine_tol: f64,
    /// A step is treated as a branch jump when the refined point moves more
    /// than `guard_factor * dt * (speed estimate)` in one grid step.
    pub guard_factor: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self { label: "traced".into(), refine_tol: 1e-10, guard_factor: 10.0 }
    }
}

impl TraceOptions {
    pub fn labeled(label: &str) -> Self {
        Self { label: label.into(), ..Self::default() }
    }
}

/// Why a trace ended.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceStop {
    /// The whole grid was traced.
    HorizonReached,
    /// The tangent-space Hessian lost positive definiteness; the trace is
    /// truncated at the last certified grid point.
    SufficiencyLost { t: f64, min_eig: f64 },
    /// Refinement stopped converging; the trace is truncated.
    RefinementStalled { t: f64, residual: f64 },
}

#[derive(Debug, Clone)]
pub struct TraceOutcome {
    pub trajectory: MinTrajectory,
    pub stop: TraceStop,
    /// Smallest tangent-space Hessian eigenvalue seen along the trace.
    pub min_sufficiency: f64,
}

impl TraceOutcome {
    pub fn completed(&self) -> bool {
        self.stop == TraceStop::HorizonReached
    }

    pub fn t_end(&self) -> f64 {
        self.trajectory.span().map(|(_, t1)| t1).unwrap_or(f64::NAN)
    }
}

/// Traces the local-minimum branch seeded by `x_seed` (a minimum at
/// `t_grid[0]`) across the grid, refining at each time from the previous
/// solution. Loss of second-order sufficiency or a refinement stall truncate
/// the trace and are reported in the outcome; a refined point moving farther
/// than the jump guard in a single step aborts with a branch-loss error, since
/// the warm start most likely slid into a different basin.
pub fn trace_minimum_trajectory(
    p: &ProblemDefinition,
    t_grid: &[f64],
    x_seed: &DVector<f64>,
    opts: &TraceOptions,
) -> Result<TraceOutcome> {
    if t_grid.len() < 2 || !t_grid.windows(2).all(|w| w[1] > w[0]) {
        return Err(TvError::InvalidParameter {
            name: "t_grid".into(),
            reason: "need at least two strictly increasing times".into(),
        });
    }
    if x_seed.len() != p.n() {
        return Err(TvError::InvalidParameter {
            name: "x_seed".into(),
            reason: format!("dimension {} does not match n = {}", x_seed.len(), p.n()),
        });
    }
    if !(opts.refine_tol > 0.0 && opts.guard_factor > 0.0) {
        return Err(TvError::InvalidParameter {
            name: "trace options".into(),
            reason: "refine_tol and guard_factor must be positive".into(),
        });
    }

    let first = local_minimum_refine(p, x_seed, t_grid[0], opts.refine_tol)?;
    let mut min_sufficiency = first.min_tangent_eig;

    // Short probe just after the start to bootstrap the branch-speed estimate
    // used by the jump guard.
    let probe_dt = (t_grid[1] - t_grid[0]) / 100.0;
    let probe = local_minimum_refine(p, &first.x, t_grid[0] + probe_dt, opts.refine_tol)?;
    min_sufficiency = min_sufficiency.min(probe.min_tangent_eig);
    let mut speed_est = (&probe.x - &first.x).norm() / probe_dt;

    let mut times = vec![t_grid[0], t_grid[0] + probe_dt];
    let mut points = vec![first.x.clone(), probe.x.clone()];
    let mut x_prev = probe.x;
    let mut stop = TraceStop::HorizonReached;

    for w in t_grid.windows(2) {
        let (t_prev, t) = (w[0], w[1]);
        let dt = t - t_prev;
        let refined = match local_minimum_refine(p, &x_prev, t, opts.refine_tol) {
            Ok(r) => r,
            Err(TvError::NotAMinimum { t, min_eig }) => {
                stop = TraceStop::SufficiencyLost { t, min_eig };
                break;
            }
            Err(TvError::RefinementFailure { t, residual, .. }) => {
                stop = TraceStop::RefinementStalled { t, residual };
                break;
            }
            Err(e) => return Err(e),
        };
        let moved = (&refined.x - points.last().unwrap()).norm();
        // Floor the guard to stay tolerant of branches accelerating from
        // rest, where the running speed estimate is still near zero.
        let guard = (opts.guard_factor * dt * speed_est).max(100.0 * dt * dt).max(1e-6);
        if moved > guard {
            return Err(TvError::BranchLoss { t, moved, guard });
        }
        if dt > 0.0 && moved > 0.0 {
            speed_est = moved / dt;
        }
        min_sufficiency = min_sufficiency.min(refined.min_tangent_eig);
        times.push(t);
        points.push(refined.x.clone());
        x_prev = refined.x;
    }

    let trajectory = MinTrajectory::from_samples(opts.label.clone(), times, points)?;
    Ok(TraceOutcome { trajectory, stop, min_sufficiency })
}
