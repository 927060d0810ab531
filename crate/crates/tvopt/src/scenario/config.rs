//! Declarative scenario files: schema, parsing, and validation.
//!
//! A scenario is a single TOML document with one problem, a default flow
//! configuration, a list of minimum trajectories to trace, and a list of
//! experiments to run against them. The exact field names are documented in
//! `docs/scenario-format.md`.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use crate::certify::{DominanceMode, RegionShape};
use crate::error::{Result, TvError};
use crate::flow::{Integrator, RetractionMode};

use super::ProblemRegistry;

/// Top-level scenario document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Base seed; stochastic experiments without their own `seed` derive one
    /// from this value and their label.
    pub seed: Option<u64>,
    pub problem: ProblemSpec,
    pub flow: FlowSpec,
    #[serde(default, rename = "trajectory")]
    pub trajectories: Vec<TrajectorySpec>,
    /// Raw experiment tables; converted by [`Scenario::experiments`] so that
    /// errors can name the offending entry.
    #[serde(default, rename = "experiment")]
    pub raw_experiments: Vec<toml::Table>,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    /// Name resolved against the problem registry (builtins included).
    pub builtin: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    /// Constant inertia used by every experiment that does not override it.
    pub alpha: Option<f64>,
    /// Piecewise-constant inertia `[[t_end, alpha], ...]`; exclusive with
    /// `alpha`, usable only by plain integrations.
    pub alpha_schedule: Option<Vec<(f64, f64)>>,
    pub dt: f64,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    #[serde(default = "default_retraction")]
    pub retraction: RetractionMode,
    pub feas_tol: Option<f64>,
    pub record_stride: Option<usize>,
}

fn default_integrator() -> Integrator {
    Integrator::Rk4
}

fn default_retraction() -> RetractionMode {
    RetractionMode::None
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub label: String,
    /// Local minimum of the frozen problem at `grid.start`.
    pub x_seed: Vec<f64>,
    pub grid: GridSpec,
    pub refine_tol: Option<f64>,
    pub guard_factor: Option<f64>,
}

/// Uniform time grid `start, ..., stop` with `nodes` points.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub nodes: usize,
}

impl GridSpec {
    pub fn times(&self) -> Vec<f64> {
        let n = self.nodes.max(2);
        (0..n)
            .map(|i| self.start + (self.stop - self.start) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Output directory; relative paths resolve against the working
    /// directory. Overridable from the command line.
    pub dir: Option<String>,
}

/// One experiment, dispatched on the `kind` field of its TOML table.
#[derive(Debug, Clone)]
pub enum ExperimentSpec {
    Simulate(SimulateSpec),
    Sweep(SweepSpec),
    Basin(BasinSpec),
    Convergence(ConvergenceSpec),
    Certify(CertifySpec),
    Landscape(LandscapeSpec),
    DetectJumps(DetectJumpsSpec),
}

impl ExperimentSpec {
    pub fn label(&self) -> &str {
        match self {
            ExperimentSpec::Simulate(s) => &s.label,
            ExperimentSpec::Sweep(s) => &s.label,
            ExperimentSpec::Basin(s) => &s.label,
            ExperimentSpec::Convergence(s) => &s.label,
            ExperimentSpec::Certify(s) => &s.label,
            ExperimentSpec::Landscape(s) => &s.label,
            ExperimentSpec::DetectJumps(s) => &s.label,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentSpec::Simulate(_) => "simulate",
            ExperimentSpec::Sweep(_) => "sweep",
            ExperimentSpec::Basin(_) => "basin",
            ExperimentSpec::Convergence(_) => "convergence",
            ExperimentSpec::Certify(_) => "certify",
            ExperimentSpec::Landscape(_) => "landscape",
            ExperimentSpec::DetectJumps(_) => "detect-jumps",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub label: String,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    /// Overrides `flow.alpha` for this run.
    pub alpha: Option<f64>,
    pub containment: Option<ContainmentSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainmentSpec {
    pub trajectory: String,
    pub radius: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub label: String,
    pub alphas: Vec<f64>,
    /// Problem parameter being swept (second grid axis).
    pub param: String,
    pub param_values: Vec<f64>,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    /// Candidate trajectories for outcome classification; defaults to every
    /// declared trajectory.
    pub trajectories: Option<Vec<String>>,
    /// Final distance beyond which a run tracks nothing.
    pub no_track_radius: Option<f64>,
    pub detect: Option<DetectSpec>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSpec {
    pub stride: Option<usize>,
    pub window: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasinSpec {
    pub label: String,
    pub n_inits: usize,
    pub alpha: Option<f64>,
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    /// Trajectory whose start point anchors the initial-condition sampler.
    pub center: String,
    /// Per-coordinate `[lo, hi]` offset ranges around the anchor; dependent
    /// coordinates (the first `m`) are re-solved from the constraints.
    pub offset_ranges: Vec<(f64, f64)>,
    pub success_time: f64,
    pub success_radius: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub label: String,
    pub x0: Vec<f64>,
    pub alpha: Option<f64>,
    pub t_end: f64,
    /// Discrete solver step sizes, typically decreasing.
    pub dtau: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySpec {
    pub label: String,
    /// Source trajectory (the one being escaped).
    pub h1: String,
    /// Target trajectory (the one being certified).
    pub h2: String,
    pub alpha: Option<f64>,
    pub t1: f64,
    pub t2: f64,
    /// Offset-ball radius shared by the convexity estimate and the target
    /// ball of the dominance region.
    pub r: f64,
    pub region: RegionShape,
    /// Radius of the start-offset ball around `h1` the region must cover.
    pub v: f64,
    #[serde(default = "default_mode")]
    pub mode: DominanceMode,
    /// Fraction of the window spent closing the equilibrium gap
    /// (uniform mode).
    pub theta: Option<f64>,
    #[serde(default = "default_time_nodes")]
    pub time_nodes: usize,
    #[serde(default = "default_cert_samples")]
    pub n_samples: usize,
    /// Quadrature/fit nodes for averaged-mode perturbation estimates.
    pub quad_nodes: Option<usize>,
    /// Start offsets for the jump stage; defaults to `h1(t1) - h2(t1)`.
    pub e1_offsets: Option<Vec<Vec<f64>>>,
    /// Reach-probe radius for an optional shallowness report on `h1`.
    pub shallow_delta: Option<f64>,
    pub seed: Option<u64>,
}

fn default_mode() -> DominanceMode {
    DominanceMode::Uniform
}

fn default_time_nodes() -> usize {
    33
}

fn default_cert_samples() -> usize {
    200
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    pub label: String,
    /// Trajectory the offsets are measured from.
    pub reference: String,
    pub alpha: Option<f64>,
    pub t_list: Vec<f64>,
    pub e_grid: EGridSpec,
}

/// Axis-aligned offset grid: the cartesian product of `nodes[i]` evenly
/// spaced values on `[lower[i], upper[i]]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EGridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub nodes: Vec<usize>,
}

impl EGridSpec {
    pub fn n_points(&self) -> usize {
        self.nodes.iter().product()
    }

    /// Grid points in row-major order (last coordinate fastest).
    pub fn points(&self) -> Vec<nalgebra::DVector<f64>> {
        let dim = self.lower.len();
        let mut pts = Vec::with_capacity(self.n_points());
        let mut idx = vec![0usize; dim];
        loop {
            let p = nalgebra::DVector::from_fn(dim, |i, _| {
                let n = self.nodes[i].max(1);
                if n == 1 {
                    0.5 * (self.lower[i] + self.upper[i])
                } else {
                    self.lower[i] + (self.upper[i] - self.lower[i]) * idx[i] as f64 / (n - 1) as f64
                }
            });
            pts.push(p);
            let mut k = dim;
            loop {
                if k == 0 {
                    return pts;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < self.nodes[k].max(1) {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectJumpsSpec {
    pub label: String,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    pub alpha: Option<f64>,
    pub trajectories: Option<Vec<String>>,
    pub stride: Option<usize>,
    pub window: Option<f64>,
}

fn field_err(field: impl Into<String>, reason: impl Into<String>) -> TvError {
    TvError::ScenarioValidation { field: field.into(), reason: reason.into() }
}

impl Scenario {
    /// Parses a scenario document from TOML text.
    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        toml::from_str(text).map_err(|e| TvError::ScenarioParse(e.to_string()))
    }

    /// Converts the raw experiment tables into typed specs, naming the
    /// offending entry on error.
    pub fn experiments(&self) -> Result<Vec<ExperimentSpec>> {
        self.raw_experiments
            .iter()
            .enumerate()
            .map(|(i, table)| {
                let field = |name: &str| format!("experiment[{i}].{name}");
                let mut table = table.clone();
                let kind = match table.remove("kind") {
                    Some(toml::Value::String(s)) => s,
                    Some(_) => return Err(field_err(field("kind"), "must be a string")),
                    None => return Err(field_err(field("kind"), "is required")),
                };
                let value = toml::Value::Table(table);
                let wrap = |e: toml::de::Error| field_err(format!("experiment[{i}]"), e.to_string());
                Ok(match kind.as_str() {
                    "simulate" => ExperimentSpec::Simulate(value.try_into().map_err(wrap)?),
                    "sweep" => ExperimentSpec::Sweep(value.try_into().map_err(wrap)?),
                    "basin" => ExperimentSpec::Basin(value.try_into().map_err(wrap)?),
                    "convergence" => ExperimentSpec::Convergence(value.try_into().map_err(wrap)?),
                    "certify" => ExperimentSpec::Certify(value.try_into().map_err(wrap)?),
                    "landscape" => ExperimentSpec::Landscape(value.try_into().map_err(wrap)?),
                    "detect-jumps" => ExperimentSpec::DetectJumps(value.try_into().map_err(wrap)?),
                    other => {
                        return Err(field_err(
                            field("kind"),
                            format!(
                                "unknown kind `{other}`; expected simulate, sweep, basin, \
                                 convergence, certify, landscape, or detect-jumps"
                            ),
                        ))
                    }
                })
            })
            .collect()
    }

    /// Full structural validation: the problem resolves, the flow and grids
    /// are well-formed, labels are unique and referenced labels exist, and
    /// every stochastic experiment can obtain a seed.
    pub fn validate(&self, registry: &ProblemRegistry) -> Result<Vec<ExperimentSpec>> {
        let problem = registry
            .resolve(&self.problem.builtin, &self.problem.params)
            .map_err(|e| field_err("problem", e.to_string()))?;
        let n = problem.n();

        // Flow defaults.
        if self.flow.alpha.is_some() && self.flow.alpha_schedule.is_some() {
            return Err(field_err("flow.alpha", "exclusive with flow.alpha_schedule; set only one"));
        }
        if let Some(a) = self.flow.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(field_err("flow.alpha", format!("must be positive, got {a}")));
            }
        }
        if let Some(segs) = &self.flow.alpha_schedule {
            if segs.is_empty() {
                return Err(field_err("flow.alpha_schedule", "must not be empty"));
            }
            if segs.iter().any(|(e, a)| !e.is_finite() || !(*a > 0.0 && a.is_finite()))
                || segs.windows(2).any(|w| w[1].0 <= w[0].0)
            {
                return Err(field_err(
                    "flow.alpha_schedule",
                    "segments must be [t_end, alpha] with increasing t_end and positive alpha",
                ));
            }
        }
        if !(self.flow.dt > 0.0 && self.flow.dt.is_finite()) {
            return Err(field_err("flow.dt", format!("must be positive, got {}", self.flow.dt)));
        }
        if let Some(tol) = self.flow.feas_tol {
            if !(tol > 0.0) {
                return Err(field_err("flow.feas_tol", format!("must be positive, got {tol}")));
            }
        }

        // Trajectories. Record each label's grid span so experiments can be
        // checked against it: sampled trajectories extrapolate linearly past
        // their grid, which would silently corrupt results.
        let mut labels: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for (i, traj) in self.trajectories.iter().enumerate() {
            let field = |name: &str| format!("trajectory[{i}].{name}");
            if traj.label.is_empty() {
                return Err(field_err(field("label"), "must not be empty"));
            }
            if labels.insert(traj.label.clone(), (traj.grid.start, traj.grid.stop)).is_some() {
                return Err(field_err(field("label"), format!("duplicate label `{}`", traj.label)));
            }
            if traj.x_seed.len() != n {
                return Err(field_err(
                    field("x_seed"),
                    format!("has dimension {}, problem needs {n}", traj.x_seed.len()),
                ));
            }
            validate_grid(&traj.grid, &field("grid"))?;
            if let Some(tol) = traj.refine_tol {
                if !(tol > 0.0) {
                    return Err(field_err(field("refine_tol"), format!("must be positive, got {tol}")));
                }
            }
            if let Some(gf) = traj.guard_factor {
                if !(gf > 0.0) {
                    return Err(field_err(field("guard_factor"), format!("must be positive, got {gf}")));
                }
            }
        }

        let experiments = self.experiments()?;
        let mut exp_labels = BTreeSet::new();
        for (i, exp) in experiments.iter().enumerate() {
            let field = |name: &str| format!("experiment[{i}].{name}");
            let label = exp.label();
            if label.is_empty() {
                return Err(field_err(field("label"), "must not be empty"));
            }
            if !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(field_err(
                    field("label"),
                    format!("`{label}` must use only letters, digits, `-`, `_` (it names output files)"),
                ));
            }
            if !exp_labels.insert(label.to_string()) {
                return Err(field_err(field("label"), format!("duplicate label `{label}`")));
            }

            let check_ref = |name: &str, l: &str| {
                if labels.contains_key(l) {
                    Ok(())
                } else {
                    Err(field_err(field(name), format!("references undefined trajectory `{l}`")))
                }
            };
            let check_span = |name: &str, l: &str, lo: f64, hi: f64| {
                check_ref(name, l)?;
                let (start, stop) = labels[l];
                if lo < start - 1e-9 || hi > stop + 1e-9 {
                    return Err(field_err(
                        field(name),
                        format!(
                            "trajectory `{l}` is traced over [{start}, {stop}] but the \
                             experiment needs [{lo}, {hi}]"
                        ),
                    ));
                }
                Ok(())
            };
            let check_alpha = |name: &str, a: Option<f64>| match a {
                Some(a) if !(a > 0.0 && a.is_finite()) => {
                    Err(field_err(field(name), format!("must be positive, got {a}")))
                }
                Some(_) => Ok(()),
                None if self.flow.alpha.is_some() => Ok(()),
                None => Err(field_err(
                    field(name),
                    "is required because the scenario sets no constant flow.alpha",
                )),
            };
            let check_x0 = |name: &str, x0: &[f64]| {
                if x0.len() == n {
                    Ok(())
                } else {
                    Err(field_err(field(name), format!("has dimension {}, problem needs {n}", x0.len())))
                }
            };
            let check_window = |t0: f64, t1: f64| {
                if t1 > t0 {
                    Ok(())
                } else {
                    Err(field_err(field("t1"), format!("horizon end {t1} must exceed start {t0}")))
                }
            };
            let need_seed = |s: Option<u64>, name: &str| {
                if s.is_none() && self.seed.is_none() {
                    Err(field_err(
                        field(name),
                        "is required for a stochastic experiment when the scenario sets no top-level seed",
                    ))
                } else {
                    Ok(())
                }
            };

            match exp {
                ExperimentSpec::Simulate(s) => {
                    check_x0("x0", &s.x0)?;
                    check_window(s.t0, s.t1)?;
                    if s.alpha.is_some() {
                        check_alpha("alpha", s.alpha)?;
                    } else if self.flow.alpha.is_none() && self.flow.alpha_schedule.is_none() {
                        return Err(field_err(field("alpha"), "is required (no flow.alpha set)"));
                    }
                    if let Some(c) = &s.containment {
                        check_span("containment.trajectory", &c.trajectory, s.t0, s.t1)?;
                        if !(c.radius > 0.0) {
                            return Err(field_err(
                                field("containment.radius"),
                                format!("must be positive, got {}", c.radius),
                            ));
                        }
                    }
                }
                ExperimentSpec::Sweep(s) => {
                    check_x0("x0", &s.x0)?;
                    check_window(s.t0, s.t1)?;
                    if s.alphas.is_empty() {
                        return Err(field_err(field("alphas"), "must not be empty"));
                    }
                    if s.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                        return Err(field_err(field("alphas"), "every inertia must be positive"));
                    }
                    if s.param_values.is_empty() {
                        return Err(field_err(field("param_values"), "must not be empty"));
                    }
                    // Probe the swept parameter name once so bad names fail here.
                    let mut params = self.problem.params.clone();
                    params.insert(s.param.clone(), s.param_values[0]);
                    registry
                        .resolve(&self.problem.builtin, &params)
                        .map_err(|e| field_err(field("param"), e.to_string()))?;
                    for l in sweep_refs(s, &self.trajectories) {
                        check_span("trajectories", &l, s.t0, s.t1)?;
                    }
                    if let Some(r) = s.no_track_radius {
                        if !(r > 0.0) {
                            return Err(field_err(
                                field("no_track_radius"),
                                format!("must be positive, got {r}"),
                            ));
                        }
                    }
                    if self.trajectories.is_empty() {
                        return Err(field_err(
                            field("trajectories"),
                            "sweep classification needs at least one declared trajectory",
                        ));
                    }
                }
                ExperimentSpec::Basin(s) => {
                    check_window(s.t0, s.t1)?;
                    check_alpha("alpha", s.alpha)?;
                    check_span("center", &s.center, s.t0, s.t1)?;
                    // Every declared trajectory participates in the outcome
                    // classification after `success_time`.
                    for l in labels.keys() {
                        check_span("success_time", l, s.success_time.min(s.t1), s.t1)?;
                    }
                    need_seed(s.seed, "seed")?;
                    if s.offset_ranges.len() != n {
                        return Err(field_err(
                            field("offset_ranges"),
                            format!("has {} entries, problem needs {n}", s.offset_ranges.len()),
                        ));
                    }
                    if s.offset_ranges.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
                        return Err(field_err(field("offset_ranges"), "entries must be finite [lo, hi] with lo <= hi"));
                    }
                    if !(s.success_time >= s.t0 && s.success_time <= s.t1) {
                        return Err(field_err(
                            field("success_time"),
                            format!("{} must lie within [{}, {}]", s.success_time, s.t0, s.t1),
                        ));
                    }
                    if !(s.success_radius > 0.0) {
                        return Err(field_err(
                            field("success_radius"),
                            format!("must be positive, got {}", s.success_radius),
                        ));
                    }
                }
                ExperimentSpec::Convergence(s) => {
                    check_x0("x0", &s.x0)?;
                    check_alpha("alpha", s.alpha)?;
                    if !(s.t_end > 0.0) {
                        return Err(field_err(field("t_end"), format!("must be positive, got {}", s.t_end)));
                    }
                    if s.dtau.is_empty() || s.dtau.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
                        return Err(field_err(field("dtau"), "needs at least one positive step size"));
                    }
                }
                ExperimentSpec::Certify(s) => {
                    if !(s.t2 > s.t1) {
                        return Err(field_err(field("t2"), format!("window end {} must exceed start {}", s.t2, s.t1)));
                    }
                    check_span("h1", &s.h1, s.t1, s.t2)?;
                    check_span("h2", &s.h2, s.t1, s.t2)?;
                    check_alpha("alpha", s.alpha)?;
                    need_seed(s.seed, "seed")?;
                    if !(s.r > 0.0 && s.r.is_finite()) {
                        return Err(field_err(field("r"), format!("must be positive, got {}", s.r)));
                    }
                    s.region.validate(n).map_err(|e| field_err(field("region"), e.to_string()))?;
                    if !(s.v > 0.0 && s.v.is_finite()) {
                        return Err(field_err(field("v"), format!("must be positive, got {}", s.v)));
                    }
                    match (s.mode, s.theta) {
                        (DominanceMode::Uniform, None) => {
                            return Err(field_err(field("theta"), "is required in uniform mode"))
                        }
                        (DominanceMode::Uniform, Some(th)) if !(th > 0.0 && th < 1.0) => {
                            return Err(field_err(field("theta"), format!("must lie in (0, 1), got {th}")))
                        }
                        (DominanceMode::Averaged, Some(_)) => {
                            return Err(field_err(field("theta"), "only applies to uniform mode"))
                        }
                        _ => {}
                    }
                    if s.time_nodes < 2 {
                        return Err(field_err(field("time_nodes"), "needs at least two grid nodes"));
                    }
                    if s.n_samples == 0 {
                        return Err(field_err(field("n_samples"), "needs at least one sample"));
                    }
                    if let Some(e1s) = &s.e1_offsets {
                        if e1s.is_empty() {
                            return Err(field_err(field("e1_offsets"), "must not be empty when given"));
                        }
                        for (k, e1) in e1s.iter().enumerate() {
                            if e1.len() != n {
                                return Err(field_err(
                                    format!("{}[{k}]", field("e1_offsets")),
                                    format!("has dimension {}, problem needs {n}", e1.len()),
                                ));
                            }
                        }
                    }
                    if let Some(d) = s.shallow_delta {
                        if !(d > 0.0) {
                            return Err(field_err(field("shallow_delta"), format!("must be positive, got {d}")));
                        }
                    }
                }
                ExperimentSpec::Landscape(s) => {
                    if s.t_list.is_empty() {
                        return Err(field_err(field("t_list"), "must not be empty"));
                    }
                    let lo = s.t_list.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = s.t_list.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    check_span("reference", &s.reference, lo, hi)?;
                    // Landscape slices admit a zero tilt, unlike the flow itself.
                    if let Some(a) = s.alpha {
                        if !(a >= 0.0 && a.is_finite()) {
                            return Err(field_err(
                                field("alpha"),
                                format!("must be nonnegative, got {a}"),
                            ));
                        }
                    } else if self.flow.alpha.is_none() {
                        return Err(field_err(
                            field("alpha"),
                            "is required because the scenario sets no constant flow.alpha",
                        ));
                    }
                    let g = &s.e_grid;
                    if g.lower.len() != n || g.upper.len() != n || g.nodes.len() != n {
                        return Err(field_err(
                            field("e_grid"),
                            format!("lower/upper/nodes must each have dimension {n}"),
                        ));
                    }
                    if g.lower.iter().zip(&g.upper).any(|(l, u)| !(l <= u)) {
                        return Err(field_err(field("e_grid"), "needs lower <= upper in every coordinate"));
                    }
                    if g.nodes.iter().any(|&k| k == 0) || g.n_points() == 0 {
                        return Err(field_err(field("e_grid.nodes"), "every axis needs at least one node"));
                    }
                }
                ExperimentSpec::DetectJumps(s) => {
                    check_x0("x0", &s.x0)?;
                    check_window(s.t0, s.t1)?;
                    if s.alpha.is_some() {
                        check_alpha("alpha", s.alpha)?;
                    } else if self.flow.alpha.is_none() && self.flow.alpha_schedule.is_none() {
                        return Err(field_err(field("alpha"), "is required (no flow.alpha set)"));
                    }
                    if self.trajectories.is_empty() {
                        return Err(field_err(
                            field("trajectories"),
                            "jump detection needs at least one declared trajectory",
                        ));
                    }
                    let ls: Vec<String> = match &s.trajectories {
                        Some(ls) => ls.clone(),
                        None => labels.keys().cloned().collect(),
                    };
                    for l in &ls {
                        check_span("trajectories", l, s.t0, s.t1)?;
                    }
                    if let Some(k) = s.stride {
                        if k == 0 {
                            return Err(field_err(field("stride"), "must be at least 1"));
                        }
                    }
                    if let Some(w) = s.window {
                        if !(w > 0.0) {
                            return Err(field_err(field("window"), format!("must be positive, got {w}")));
                        }
                    }
                }
            }
        }
        Ok(experiments)
    }
}

fn validate_grid(g: &GridSpec, field: &str) -> Result<()> {
    if g.nodes < 2 {
        return Err(field_err(format!("{field}.nodes"), "needs at least two nodes"));
    }
    if !(g.stop > g.start) || !g.start.is_finite() || !g.stop.is_finite() {
        return Err(field_err(
            format!("{field}.stop"),
            format!("needs finite start < stop, got [{}, {}]", g.start, g.stop),
        ));
    }
    Ok(())
}

/// Trajectory labels a sweep classifies against (explicit list or all).
pub(super) fn sweep_refs(s: &SweepSpec, all: &[TrajectorySpec]) -> Vec<String> {
    match &s.trajectories {
        Some(ls) => ls.clone(),
        None => all.iter().map(|t| t.label.clone()).collect(),
    }
}
