//! Continuous-flow integration and its discrete-time counterparts.

mod kkt;
mod proximal;
mod trace;

pub use kkt::{local_minimum_refine, RefinedMinimum};
pub use proximal::{convergence_experiment, sequential_proximal_solve, ConvergenceRow, ConvergenceTable};
pub use trace::{trace_minimum_trajectory, TraceOptions, TraceOutcome, TraceStop};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TvError};
use crate::geometry::{newton_retract, pode_rhs};
use crate::problem::{MinTrajectory, ProblemDefinition};

/// Inertia as a function of time: constant, or piecewise constant for
/// schedules that loosen or tighten the flow across phases.
#[derive(Debug, Clone)]
pub enum AlphaSchedule {
    Constant(f64),
    /// Segments `(t_end, alpha)` sorted by `t_end`; the last segment's value
    /// extends beyond its end time.
    Piecewise(Vec<(f64, f64)>),
}

impl AlphaSchedule {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            AlphaSchedule::Constant(a) => *a,
            AlphaSchedule::Piecewise(segs) => {
                for (end, a) in segs {
                    if t < *end {
                        return *a;
                    }
                }
                segs.last().map(|(_, a)| *a).unwrap_or(f64::NAN)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            AlphaSchedule::Constant(a) => *a > 0.0 && a.is_finite(),
            AlphaSchedule::Piecewise(segs) => {
                !segs.is_empty()
                    && segs.iter().all(|(e, a)| e.is_finite() && *a > 0.0 && a.is_finite())
                    && segs.windows(2).all(|w| w[1].0 > w[0].0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(TvError::InvalidParameter {
                name: "alpha".into(),
                reason: "inertia must be positive (piecewise segments sorted by end time)".into(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Rk4,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetractionMode {
    None,
    Newton,
}

/// Optional run-time monitor: distance from a reference trajectory beyond
/// which a containment-violation event is logged (the run continues).
#[derive(Debug, Clone)]
pub struct Containment {
    pub radius: f64,
    pub reference: MinTrajectory,
}

/// Configuration for [`integrate_pode`].
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub alpha: AlphaSchedule,
    pub dt: f64,
    pub integrator: Integrator,
    pub feas_tol: f64,
    pub retraction: RetractionMode,
    pub containment: Option<Containment>,
    /// Keep every k-th step in the sample log (the final state is always kept).
    pub record_stride: usize,
}

impl FlowConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha: AlphaSchedule::Constant(alpha),
            dt: 1e-3,
            integrator: Integrator::Rk4,
            feas_tol: 1e-8,
            retraction: RetractionMode::None,
            containment: None,
            record_stride: 1,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_integrator(mut self, i: Integrator) -> Self {
        self.integrator = i;
        self
    }

    pub fn with_retraction(mut self, r: RetractionMode) -> Self {
        self.retraction = r;
        self
    }

    pub fn with_feas_tol(mut self, tol: f64) -> Self {
        self.feas_tol = tol;
        self
    }

    pub fn with_containment(mut self, c: Containment) -> Self {
        self.containment = Some(c);
        self
    }

    pub fn with_record_stride(mut self, k: usize) -> Self {
        self.record_stride = k.max(1);
        self
    }

    pub fn with_alpha_schedule(mut self, s: AlphaSchedule) -> Self {
        self.alpha = s;
        self
    }

    fn validate(&self) -> Result<()> {
        self.alpha.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(TvError::InvalidParameter {
                name: "dt".into(),
                reason: format!("step must be positive, got {}", self.dt),
            });
        }
        if !(self.feas_tol > 0.0) {
            return Err(TvError::InvalidParameter {
                name: "feas_tol".into(),
                reason: "feasibility tolerance must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// A Newton retraction pulled the state back onto the constraint set.
    Retraction,
    /// The state left the configured containment ball (run continues).
    ContainmentViolation,
    /// The constraint Jacobian lost row rank; the run stops here.
    RankError,
    /// A discrete solver step failed; the run continues from the last iterate.
    StepFailure,
    /// The objective dipped below its declared lower bound.
    BoundViolation,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowEvent {
    pub t: f64,
    pub kind: EventKind,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub feas: f64,
    pub obj: f64,
}

/// Time-stamped log of one run: state samples plus notable events.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrajectoryRecord {
    pub samples: Vec<Sample>,
    pub events: Vec<FlowEvent>,
}

impl TrajectoryRecord {
    pub fn final_sample(&self) -> Option<&Sample> {
        self.samples.last()
    }

    pub fn final_state(&self) -> Option<DVector<f64>> {
        self.samples.last().map(|s| DVector::from_vec(s.x.clone()))
    }

    /// Whether the run reached `t1` (no mid-flight abort).
    pub fn completed(&self, t1: f64) -> bool {
        self.samples
            .last()
            .map(|s| s.t >= t1 - 1e-12 * (1.0 + t1.abs()))
            .unwrap_or(false)
    }

    pub fn max_feas_residual(&self) -> f64 {
        self.samples.iter().map(|s| s.feas).fold(0.0, f64::max)
    }

    /// State at time `t` by linear interpolation between samples.
    pub fn state_at(&self, t: f64) -> Option<DVector<f64>> {
        if self.samples.is_empty() {
            return None;
        }
        let first = self.samples.first().unwrap();
        let last = self.samples.last().unwrap();
        if t <= first.t {
            return Some(DVector::from_vec(first.x.clone()));
        }
        if t >= last.t {
            return Some(DVector::from_vec(last.x.clone()));
        }
        let i = self.samples.partition_point(|s| s.t <= t) - 1;
        let (a, b) = (&self.samples[i], &self.samples[i + 1]);
        let w = (t - a.t) / (b.t - a.t);
        Some(DVector::from_fn(a.x.len(), |k, _| a.x[k] * (1.0 - w) + b.x[k] * w))
    }
}

struct Recorder<'a> {
    p: &'a ProblemDefinition,
    rec: TrajectoryRecord,
    stride: usize,
    count: usize,
    bound_flagged: bool,
}

impl<'a> Recorder<'a> {
    fn new(p: &'a ProblemDefinition, stride: usize) -> Self {
        Self { p, rec: TrajectoryRecord::default(), stride: stride.max(1), count: 0, bound_flagged: false }
    }

    fn push(&mut self, t: f64, x: &DVector<f64>, force: bool) -> Result<()> {
        let keep = force || self.count % self.stride == 0;
        self.count += 1;
        let obj = self.p.f_checked(x, t)?;
        if let Some(lb) = self.p.lower_bound() {
            if !self.bound_flagged && obj < lb - 1e-9 * (1.0 + lb.abs()) {
                self.rec.events.push(FlowEvent {
                    t,
                    kind: EventKind::BoundViolation,
                    detail: format!("objective {obj:.6e} below declared lower bound {lb:.6e}"),
                });
                self.bound_flagged = true;
            }
        }
        if keep {
            let feas = self.p.feasibility_residual(x, t);
            self.rec.samples.push(Sample { t, x: x.iter().copied().collect(), feas, obj });
        }
        Ok(())
    }
}

fn rk4_step<F>(rhs: &mut F, x: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    let k1 = rhs(x, t)?;
    let k2 = rhs(&(x + &k1 * (dt / 2.0)), t + dt / 2.0)?;
    let k3 = rhs(&(x + &k2 * (dt / 2.0)), t + dt / 2.0)?;
    let k4 = rhs(&(x + &k3 * dt), t + dt)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

fn euler_step<F>(rhs: &mut F, x: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    Ok(x + rhs(x, t)? * dt)
}

/// Integrates the inertial projected-gradient flow from a feasible start over
/// `[t0, t1]` with fixed steps.
///
/// Preconditions: `|g(x0, t0)| <= feas_tol`. Mid-flight rank deficiency or a
/// failed retraction stop the run early; the partial record carries a
/// `RankError` / `Retraction` event explaining why, and `completed(t1)`
/// reports false. Containment violations are logged, never fatal.
pub fn integrate_pode(
    p: &ProblemDefinition,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    cfg: &FlowConfig,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    if x0.len() != p.n() {
        return Err(TvError::InvalidParameter {
            name: "x0".into(),
            reason: format!("dimension {} does not match n = {}", x0.len(), p.n()),
        });
    }
    if t1 < t0 {
        return Err(TvError::InvalidParameter {
            name: "t1".into(),
            reason: format!("horizon end {t1} precedes start {t0}"),
        });
    }
    let res0 = p.feasibility_residual(x0, t0);
    if res0 > cfg.feas_tol {
        return Err(TvError::InfeasibleStart { residual: res0, tol: cfg.feas_tol });
    }

    let mut recorder = Recorder::new(p, cfg.record_stride);
    recorder.push(t0, x0, true)?;

    let mut x = x0.clone();
    let mut t = t0;
    let total = t1 - t0;
    let n_steps = (total / cfg.dt).ceil() as usize;
    let mut containment_flagged = false;

    for step in 0..n_steps {
        let t_next = if step + 1 == n_steps { t1 } else { t0 + (step + 1) as f64 * cfg.dt };
        let dt = t_next - t;
        if dt <= 0.0 {
            break;
        }
        let mut rhs = |x: &DVector<f64>, t: f64| pode_rhs(p, x, t, cfg.alpha.at(t));
        let next = match cfg.integrator {
            Integrator::Rk4 => rk4_step(&mut rhs, &x, t, dt),
            Integrator::Euler => euler_step(&mut rhs, &x, t, dt),
        };
        match next {
            Ok(v) => x = v,
            Err(TvError::RankDeficient { t: te, sigma_min, tol }) => {
                recorder.rec.events.push(FlowEvent {
                    t,
                    kind: EventKind::RankError,
                    detail: format!(
                        "constraint Jacobian rank-deficient at t = {te} (sigma_min {sigma_min:.3e} <= {tol:.3e}); run stopped"
                    ),
                });
                return Ok(recorder.rec);
            }
            Err(e) => return Err(e),
        }
        t = t_next;

        if p.m() > 0 {
            let feas = p.feasibility_residual(&x, t);
            if feas > cfg.feas_tol && cfg.retraction == RetractionMode::Newton {
                match newton_retract(p, &x, t, 0.1 * cfg.feas_tol, 10) {
                    Ok(xr) => {
                        recorder.rec.events.push(FlowEvent {
                            t,
                            kind: EventKind::Retraction,
                            detail: format!("pulled residual {feas:.3e} back below {:.3e}", 0.1 * cfg.feas_tol),
                        });
                        x = xr;
                    }
                    Err(TvError::RetractionFailure { residual, iters, .. }) => {
                        recorder.rec.events.push(FlowEvent {
                            t,
                            kind: EventKind::Retraction,
                            detail: format!(
                                "retraction failed (residual {residual:.3e} after {iters} iterations); run stopped"
                            ),
                        });
                        return Ok(recorder.rec);
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        if let Some(c) = &cfg.containment {
            let dist = (&x - c.reference.h(t)).norm();
            if dist > c.radius && !containment_flagged {
                recorder.rec.events.push(FlowEvent {
                    t,
                    kind: EventKind::ContainmentViolation,
                    detail: format!("distance {dist:.6e} from `{}` exceeds {}", c.reference.label(), c.radius),
                });
                containment_flagged = true;
            } else if dist <= c.radius {
                containment_flagged = false;
            }
        }

        recorder.push(t, &x, step + 1 == n_steps)?;
    }
    Ok(recorder.rec)
}

/// Configuration for [`frozen_flow_classify`].
#[derive(Debug, Clone, Serialize)]
pub struct FrozenFlowConfig {
    /// Pseudo-time step of the frozen-time descent flow.
    pub step: f64,
    pub max_steps: usize,
    /// Stationarity threshold on the projected gradient norm.
    pub stat_tol: f64,
    /// Maximum distance to a candidate minimum for a match.
    pub match_radius: f64,
    pub feas_tol: f64,
}

impl Default for FrozenFlowConfig {
    fn default() -> Self {
        Self { step: 1e-3, max_steps: 200_000, stat_tol: 1e-8, match_radius: 1e-3, feas_tol: 1e-8 }
    }
}

/// Outcome of a frozen-time descent: the basin label, or divergence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Classification {
    Label(String),
    Diverged,
}

impl Classification {
    pub fn label(&self) -> Option<&str> {
        match self {
            Classification::Label(l) => Some(l),
            Classification::Diverged => None,
        }
    }
}

/// Runs the frozen-time projected descent `x' = -P(x, t) grad_f(x, t)` (time
/// `t` held fixed) from `x0` until stationarity or the step budget, then
/// reports the nearest candidate minimum within `match_radius`. No such match
/// or a non-finite state classifies as [`Classification::Diverged`]; rank
/// deficiency along the way is an error.
pub fn frozen_flow_classify(
    p: &ProblemDefinition,
    t: f64,
    x0: &DVector<f64>,
    minima: &[MinTrajectory],
    cfg: &FrozenFlowConfig,
) -> Result<Classification> {
    let mut x = x0.clone();
    if p.m() > 0 {
        match newton_retract(p, &x, t, cfg.feas_tol, 10) {
            Ok(v) => x = v,
            Err(TvError::RetractionFailure { .. }) => return Ok(Classification::Diverged),
            Err(e) => return Err(e),
        }
    }
    let mut rhs = |x: &DVector<f64>, _s: f64| -> Result<DVector<f64>> {
        let geo = crate::geometry::evaluate_geometry(p, x, t, 0.0)?;
        Ok(-geo.grad_l)
    };
    for _ in 0..cfg.max_steps {
        let geo = match crate::geometry::evaluate_geometry(p, &x, t, 0.0) {
            Ok(g) => g,
            Err(TvError::EvaluationFailure { .. }) => return Ok(Classification::Diverged),
            Err(e) => return Err(e),
        };
        if geo.grad_l.norm() <= cfg.stat_tol {
            break;
        }
        x = match rk4_step(&mut rhs, &x, 0.0, cfg.step) {
            Ok(v) => v,
            Err(TvError::EvaluationFailure { .. }) => return Ok(Classification::Diverged),
            Err(e) => return Err(e),
        };
        if !x.iter().all(|c| c.is_finite()) {
            return Ok(Classification::Diverged);
        }
        if p.m() > 0 && p.feasibility_residual(&x, t) > 0.1 * cfg.feas_tol {
            match newton_retract(p, &x, t, 0.01 * cfg.feas_tol, 10) {
                Ok(v) => x = v,
                Err(TvError::RetractionFailure { .. }) => return Ok(Classification::Diverged),
                Err(e) => return Err(e),
            }
        }
    }
    let mut best: Option<(f64, &MinTrajectory)> = None;
    for m in minima {
        let d = (&x - m.h(t)).norm();
        if best.as_ref().map(|(bd, _)| d < *bd).unwrap_or(true) {
            best = Some((d, m));
        }
    }
    match best {
        Some((d, m)) if d <= cfg.match_radius => Ok(Classification::Label(m.label().to_string())),
        _ => Ok(Classification::Diverged),
    }
}

/// Explicit-Euler discretization of the flow on a caller-supplied time grid:
/// one gradient-and-drift step per grid interval, with optional Newton
/// retraction after each step.
pub fn forward_euler_track(
    p: &ProblemDefinition,
    x0: &DVector<f64>,
    time_grid: &[f64],
    alpha: f64,
    retraction: RetractionMode,
    feas_tol: f64,
) -> Result<TrajectoryRecord> {
    if time_grid.len() < 2 || !time_grid.windows(2).all(|w| w[1] > w[0]) {
        return Err(TvError::InvalidParameter {
            name: "time_grid".into(),
            reason: "need at least two strictly increasing times".into(),
        });
    }
    if !(alpha > 0.0) {
        return Err(TvError::InvalidParameter {
            name: "alpha".into(),
            reason: format!("inertia must be positive, got {alpha}"),
        });
    }
    let mut recorder = Recorder::new(p, 1);
    let mut x = x0.clone();
    recorder.push(time_grid[0], &x, true)?;
    for w in time_grid.windows(2) {
        let (t_prev, t_next) = (w[0], w[1]);
        let dt = t_next - t_prev;
        x += pode_rhs(p, &x, t_prev, alpha)? * dt;
        if p.m() > 0 && retraction == RetractionMode::Newton && p.feasibility_residual(&x, t_next) > feas_tol {
            x = newton_retract(p, &x, t_next, 0.1 * feas_tol, 10)?;
        }
        recorder.push(t_next, &x, true)?;
    }
    Ok(recorder.rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin_quartic, builtin_tracking_quadratic};
    use approx::assert_abs_diff_eq;

    #[test]
    fn rk4_matches_exponential_decay() {
        let p = crate::problem::ProblemDefinition::unconstrained(
            1,
            |x, _t| 0.5 * x[0] * x[0],
            |x, _t| x.clone(),
        )
        .build()
        .unwrap();
        let cfg = FlowConfig::new(1.0).with_dt(1e-3);
        let rec = integrate_pode(&p, &DVector::from_vec(vec![1.0]), 0.0, 1.0, &cfg).unwrap();
        let x1 = rec.final_sample().unwrap().x[0];
        assert_abs_diff_eq!(x1, (-1.0f64).exp(), epsilon = 1e-6);
        assert!(rec.completed(1.0));
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let p = crate::problem::builtin_ackley_constrained(0.01).unwrap();
        let x0 = DVector::from_vec(vec![5.0, 5.0]);
        let cfg = FlowConfig::new(0.2);
        let err = integrate_pode(&p, &x0, 0.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, TvError::InfeasibleStart { .. }));
    }

    #[test]
    fn frozen_flow_classifies_quartic_basins() {
        let p = builtin_quartic(5.0);
        let minima = vec![
            MinTrajectory::analytic("local-1", 1, |t: f64| DVector::from_vec(vec![-2.0 + 5.0 * t.sin()]), |t: f64| {
                DVector::from_vec(vec![5.0 * t.cos()])
            }),
            MinTrajectory::analytic("global", 1, |t: f64| DVector::from_vec(vec![1.0 + 5.0 * t.sin()]), |t: f64| {
                DVector::from_vec(vec![5.0 * t.cos()])
            }),
        ];
        let cfg = FrozenFlowConfig::default();
        let c = frozen_flow_classify(&p, 0.0, &DVector::from_vec(vec![-1.5]), &minima, &cfg).unwrap();
        assert_eq!(c, Classification::Label("local-1".into()));
        let c = frozen_flow_classify(&p, 0.0, &DVector::from_vec(vec![-0.5]), &minima, &cfg).unwrap();
        assert_eq!(c, Classification::Label("global".into()));
        // The same offsets shifted by the moving frame at a later time.
        let t = 1.0;
        let c = frozen_flow_classify(&p, t, &DVector::from_vec(vec![-1.5 + 5.0 * t.sin()]), &minima, &cfg).unwrap();
        assert_eq!(c, Classification::Label("local-1".into()));
    }

    #[test]
    fn euler_tracker_stays_close_to_the_flow() {
        let p = builtin_tracking_quadratic(1.0).unwrap();
        let alpha = 0.1;
        let t_end = 2.0 * std::f64::consts::PI;
        let grid: Vec<f64> = (0..=6283).map(|i| i as f64 * 1e-3).collect();
        let rec = forward_euler_track(&p, &DVector::zeros(1), &grid, alpha, RetractionMode::None, 1e-8).unwrap();
        let reference = integrate_pode(&p, &DVector::zeros(1), 0.0, t_end, &FlowConfig::new(alpha).with_dt(1e-5))
            .unwrap();
        let mut max_dev: f64 = 0.0;
        for s in &rec.samples {
            if s.t > t_end {
                continue;
            }
            let r = reference.state_at(s.t).unwrap();
            max_dev = max_dev.max((r[0] - s.x[0]).abs());
        }
        assert!(max_dev <= 5e-3, "max deviation {max_dev}");
    }

    #[test]
    fn alpha_schedule_switches_value() {
        let s = AlphaSchedule::Piecewise(vec![(1.0, 0.8), (2.0, 0.1)]);
        assert_abs_diff_eq!(s.at(0.5), 0.8);
        assert_abs_diff_eq!(s.at(1.5), 0.1);
        assert_abs_diff_eq!(s.at(5.0), 0.1);
    }
}
