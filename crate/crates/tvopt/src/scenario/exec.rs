//! Experiment execution: one function per experiment kind, each writing its
//! artifacts and returning the numbers that go into the run summary.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::certify::{
    check_dominance, detect_jumps, escape_certificate, estimate_one_point_convexity,
    jump_certificate, jump_certificate_averaged, shallowness_check, tracking_certificate,
    uniform_time_grid, ConvexityCertificate, DetectConfig, DominanceCertificate, DominanceMode,
    DominanceRegion, EscapeCertificate, JumpCertificate, JumpEvent, PerturbationProbeConfig,
    RaProbeConfig, ShallownessReport, TrackingCertificate, EVIDENCE_GRADE,
};
use crate::error::{Result, TvError};
use crate::flow::{
    integrate_pode, trace_minimum_trajectory, AlphaSchedule, Containment, ConvergenceTable,
    FlowConfig, FlowEvent, TraceOptions, TrajectoryRecord,
};
use crate::geometry::reshaped_landscape;
use crate::problem::{MinTrajectory, ProblemDefinition};

use super::config::{
    sweep_refs, BasinSpec, CertifySpec, ConvergenceSpec, DetectJumpsSpec, ExperimentSpec,
    FlowSpec, LandscapeSpec, ProblemSpec, SimulateSpec, SweepSpec, TrajectorySpec,
};
use super::output::{fmt_float, write_json, write_record_csv, CsvSink};
use super::{split_seed, ProblemRegistry};

/// Shared state for one scenario run.
pub(super) struct ExecContext<'a> {
    pub problem: &'a ProblemDefinition,
    pub problem_spec: &'a ProblemSpec,
    pub registry: &'a ProblemRegistry,
    pub trajectory_specs: &'a [TrajectorySpec],
    pub trajectories: &'a BTreeMap<String, MinTrajectory>,
    pub flow: &'a FlowSpec,
    pub base_seed: u64,
    pub out_dir: &'a Path,
    pub workers: Option<usize>,
}

/// What one experiment reports back to the runner.
pub(super) struct ExperimentRun {
    pub files: Vec<String>,
    pub key_numbers: BTreeMap<String, f64>,
    pub verdicts: BTreeMap<String, bool>,
    pub artifact: ExperimentArtifact,
}

/// In-memory result of one experiment, for library callers.
pub enum ExperimentArtifact {
    Simulate { label: String, record: TrajectoryRecord },
    DetectJumps { label: String, record: TrajectoryRecord, events: Vec<JumpEvent> },
    Sweep { label: String, cells: Vec<SweepCell> },
    Basin { label: String, rows: Vec<BasinRow> },
    Convergence { label: String, table: ConvergenceTable },
    Certify { label: String, bundle: Box<CertifyBundle> },
    Landscape { label: String },
    Failed { label: String, kind: String, error: String },
}

impl ExperimentArtifact {
    pub fn label(&self) -> &str {
        match self {
            ExperimentArtifact::Simulate { label, .. }
            | ExperimentArtifact::DetectJumps { label, .. }
            | ExperimentArtifact::Sweep { label, .. }
            | ExperimentArtifact::Basin { label, .. }
            | ExperimentArtifact::Convergence { label, .. }
            | ExperimentArtifact::Certify { label, .. }
            | ExperimentArtifact::Landscape { label }
            | ExperimentArtifact::Failed { label, .. } => label,
        }
    }
}

/// One grid cell of a sweep: a (inertia, parameter value) pair.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub param_value: f64,
    /// `tracks-<label>`, `no-track`, or `error`.
    pub outcome: String,
    pub n_jump_events: usize,
    /// Distance from the final state to each candidate branch at the horizon.
    pub final_distances: BTreeMap<String, f64>,
    pub error: Option<String>,
}

/// One initial condition of a basin experiment.
#[derive(Debug, Clone, Serialize)]
pub struct BasinRow {
    pub index: usize,
    pub x0: Vec<f64>,
    /// Label of the branch tracked after `success_time`, `none`, or
    /// `aborted`.
    pub outcome: String,
    /// Largest distance to each branch over the post-`success_time` samples.
    pub max_post_distance: BTreeMap<String, f64>,
}

/// Every certificate one `certify` experiment attempted, with the reasons
/// for the stages that were refused.
#[derive(Debug, Clone, Serialize)]
pub struct CertifyBundle {
    pub h1: String,
    pub h2: String,
    pub alpha: f64,
    pub t1: f64,
    pub t2: f64,
    pub e1_offsets: Vec<Vec<f64>>,
    pub convexity: Option<ConvexityCertificate>,
    pub dominance: Option<DominanceCertificate>,
    pub jump: Option<JumpCertificate>,
    pub tracking: Option<TrackingCertificate>,
    pub escape: Option<EscapeCertificate>,
    pub shallowness: Option<ShallownessReport>,
    /// Stage name -> refusal reason, for stages that produced no certificate.
    pub refusals: BTreeMap<String, String>,
    pub grade: &'static str,
}

pub(super) fn run_experiment(ctx: &ExecContext, exp: &ExperimentSpec) -> Result<ExperimentRun> {
    match exp {
        ExperimentSpec::Simulate(s) => run_simulate(ctx, s),
        ExperimentSpec::Sweep(s) => run_sweep(ctx, s),
        ExperimentSpec::Basin(s) => run_basin(ctx, s),
        ExperimentSpec::Convergence(s) => run_convergence(ctx, s),
        ExperimentSpec::Certify(s) => run_certify(ctx, s),
        ExperimentSpec::Landscape(s) => run_landscape(ctx, s),
        ExperimentSpec::DetectJumps(s) => run_detect_jumps(ctx, s),
    }
}

/// Builds the flow configuration for one experiment, with an optional
/// constant-inertia override.
fn flow_config(flow: &FlowSpec, alpha_override: Option<f64>) -> Result<FlowConfig> {
    let mut cfg = match (alpha_override, flow.alpha, &flow.alpha_schedule) {
        (Some(a), _, _) => FlowConfig::new(a),
        (None, Some(a), _) => FlowConfig::new(a),
        (None, None, Some(segs)) => FlowConfig::new(segs[0].1)
            .with_alpha_schedule(AlphaSchedule::Piecewise(segs.clone())),
        (None, None, None) => {
            return Err(TvError::InvalidParameter {
                name: "flow.alpha".into(),
                reason: "no inertia available for this experiment".into(),
            })
        }
    };
    cfg = cfg
        .with_dt(flow.dt)
        .with_integrator(flow.integrator)
        .with_retraction(flow.retraction);
    if let Some(tol) = flow.feas_tol {
        cfg = cfg.with_feas_tol(tol);
    }
    if let Some(k) = flow.record_stride {
        cfg = cfg.with_record_stride(k);
    }
    Ok(cfg)
}

/// Constant inertia for experiments that cannot use a schedule.
fn constant_alpha(flow: &FlowSpec, alpha_override: Option<f64>) -> Result<f64> {
    alpha_override.or(flow.alpha).ok_or_else(|| TvError::InvalidParameter {
        name: "alpha".into(),
        reason: "this experiment needs a constant inertia (its own or flow.alpha)".into(),
    })
}

fn eff_feas_tol(flow: &FlowSpec) -> f64 {
    flow.feas_tol.unwrap_or(1e-8)
}

/// Runs `f` on a dedicated rayon pool of `workers` threads, or inline on the
/// global pool.
fn with_pool<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None | Some(0) => Ok(f()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(k).build().map_err(|e| {
                TvError::InvalidParameter { name: "workers".into(), reason: e.to_string() }
            })?;
            Ok(pool.install(f))
        }
    }
}

/// Folds a certificate-stage result: refusals and sampling dead ends become
/// recorded reasons, everything else propagates.
fn stage<T>(
    refusals: &mut BTreeMap<String, String>,
    name: &str,
    result: Result<T>,
) -> Result<Option<T>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(
            e @ (TvError::CertificateRefused { .. }
            | TvError::NoEquilibriumBranch { .. }
            | TvError::SamplingFailure { .. }),
        ) => {
            refusals.insert(name.into(), e.to_string());
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    label: &'a str,
    completed: bool,
    n_samples: usize,
    max_feas_residual: f64,
    final_t: f64,
    final_obj: f64,
    events: &'a [FlowEvent],
}

fn run_simulate(ctx: &ExecContext, s: &SimulateSpec) -> Result<ExperimentRun> {
    let mut cfg = flow_config(ctx.flow, s.alpha)?;
    if let Some(c) = &s.containment {
        cfg = cfg.with_containment(Containment {
            radius: c.radius,
            reference: ctx.trajectories[&c.trajectory].clone(),
        });
    }
    let x0 = DVector::from_column_slice(&s.x0);
    let record = integrate_pode(ctx.problem, &x0, s.t0, s.t1, &cfg)?;

    let completed = record.completed(s.t1);
    let report = SimulateReport {
        label: &s.label,
        completed,
        n_samples: record.samples.len(),
        max_feas_residual: record.max_feas_residual(),
        final_t: record.final_sample().map(|smp| smp.t).unwrap_or(f64::NAN),
        final_obj: record.final_sample().map(|smp| smp.obj).unwrap_or(f64::NAN),
        events: &record.events,
    };
    let files = vec![
        write_record_csv(ctx.out_dir, &format!("{}.csv", s.label), &record)?,
        write_json(ctx.out_dir, &format!("{}.json", s.label), &report)?,
    ];

    let mut key_numbers = BTreeMap::new();
    key_numbers.insert("max_feas_residual".into(), record.max_feas_residual());
    key_numbers.insert("n_events".into(), record.events.len() as f64);
    let mut verdicts = BTreeMap::new();
    verdicts.insert("completed".into(), completed);

    Ok(ExperimentRun {
        files,
        key_numbers,
        verdicts,
        artifact: ExperimentArtifact::Simulate { label: s.label.clone(), record },
    })
}

#[derive(Serialize)]
struct DetectReport<'a> {
    label: &'a str,
    completed: bool,
    events: &'a [JumpEvent],
}

fn run_detect_jumps(ctx: &ExecContext, s: &DetectJumpsSpec) -> Result<ExperimentRun> {
    let cfg = flow_config(ctx.flow, s.alpha)?;
    let x0 = DVector::from_column_slice(&s.x0);
    let record = integrate_pode(ctx.problem, &x0, s.t0, s.t1, &cfg)?;

    let labels: Vec<String> = match &s.trajectories {
        Some(ls) => ls.clone(),
        None => ctx.trajectories.keys().cloned().collect(),
    };
    let minima: Vec<MinTrajectory> =
        labels.iter().map(|l| ctx.trajectories[l].clone()).collect();
    let mut dcfg = DetectConfig::default();
    if let Some(k) = s.stride {
        dcfg.stride = k;
    }
    if let Some(w) = s.window {
        dcfg.window = w;
    }
    let events = detect_jumps(ctx.problem, &record, &minima, &dcfg)?;

    let mut sink = CsvSink::create(ctx.out_dir, &format!("{}_events.csv", s.label))?;
    sink.header(&["t", "from", "to"])?;
    for ev in &events {
        sink.row(&[fmt_float(ev.t), ev.from.clone(), ev.to.clone()])?;
    }
    let completed = record.completed(s.t1);
    let report = DetectReport { label: &s.label, completed, events: &events };
    let files = vec![
        write_record_csv(ctx.out_dir, &format!("{}.csv", s.label), &record)?,
        sink.finish()?,
        write_json(ctx.out_dir, &format!("{}.json", s.label), &report)?,
    ];

    let mut key_numbers = BTreeMap::new();
    key_numbers.insert("n_jump_events".into(), events.len() as f64);
    if let Some(first) = events.first() {
        key_numbers.insert("first_jump_t".into(), first.t);
    }
    let mut verdicts = BTreeMap::new();
    verdicts.insert("completed".into(), completed);

    Ok(ExperimentRun {
        files,
        key_numbers,
        verdicts,
        artifact: ExperimentArtifact::DetectJumps { label: s.label.clone(), record, events },
    })
}

/// One parameter value of a sweep: the re-built problem and its re-traced
/// branches, or the reason they are unavailable.
struct ParamCase {
    value: f64,
    problem: Option<ProblemDefinition>,
    minima: Vec<(String, MinTrajectory)>,
    error: Option<String>,
}

fn sweep_case(ctx: &ExecContext, s: &SweepSpec, labels: &[String], value: f64) -> ParamCase {
    let mut params = ctx.problem_spec.params.clone();
    params.insert(s.param.clone(), value);
    let problem = match ctx.registry.resolve(&ctx.problem_spec.builtin, &params) {
        Ok(p) => p,
        Err(e) => {
            return ParamCase { value, problem: None, minima: Vec::new(), error: Some(e.to_string()) }
        }
    };
    let mut minima = Vec::new();
    for label in labels {
        let spec = ctx
            .trajectory_specs
            .iter()
            .find(|t| &t.label == label)
            .expect("validated trajectory reference");
        let mut topts = TraceOptions { label: label.clone(), ..TraceOptions::default() };
        if let Some(tol) = spec.refine_tol {
            topts.refine_tol = tol;
        }
        if let Some(gf) = spec.guard_factor {
            topts.guard_factor = gf;
        }
        let seed = DVector::from_column_slice(&spec.x_seed);
        match trace_minimum_trajectory(&problem, &spec.grid.times(), &seed, &topts) {
            Ok(out) if out.completed() => minima.push((label.clone(), out.trajectory)),
            Ok(out) => {
                return ParamCase {
                    value,
                    problem: None,
                    minima: Vec::new(),
                    error: Some(format!(
                        "trajectory `{label}` stopped early at {} = {value}: {:?}",
                        s.param, out.stop
                    )),
                }
            }
            Err(e) => {
                return ParamCase {
                    value,
                    problem: None,
                    minima: Vec::new(),
                    error: Some(format!(
                        "trajectory `{label}` failed at {} = {value}: {e}",
                        s.param
                    )),
                }
            }
        }
    }
    ParamCase { value, problem: Some(problem), minima, error: None }
}

/// Default classification radius for sweeps that set none: a final state
/// farther than this from every traced trajectory counts as `no-track`.
const SWEEP_TRACK_RADIUS: f64 = 1.0;

fn sweep_cell(ctx: &ExecContext, s: &SweepSpec, case: &ParamCase, alpha: f64) -> SweepCell {
    let mut cell = SweepCell {
        alpha,
        param_value: case.value,
        outcome: "error".into(),
        n_jump_events: 0,
        final_distances: BTreeMap::new(),
        error: case.error.clone(),
    };
    let Some(problem) = &case.problem else {
        return cell;
    };
    let cfg = match flow_config(ctx.flow, Some(alpha)) {
        Ok(c) => c,
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    };
    let x0 = DVector::from_column_slice(&s.x0);
    let record = match integrate_pode(problem, &x0, s.t0, s.t1, &cfg) {
        Ok(r) => r,
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    };
    if !record.completed(s.t1) {
        let detail = record
            .events
            .last()
            .map(|ev| ev.detail.clone())
            .unwrap_or_else(|| "integration stopped early".into());
        cell.error = Some(detail);
        return cell;
    }

    let x_end = record.final_state().expect("completed record has samples");
    let radius = s.no_track_radius.unwrap_or(SWEEP_TRACK_RADIUS);
    let mut best: Option<(&str, f64)> = None;
    for (label, h) in &case.minima {
        let d = (&x_end - h.h(s.t1)).norm();
        cell.final_distances.insert(label.clone(), d);
        if best.map(|(_, bd)| d < bd).unwrap_or(true) {
            best = Some((label, d));
        }
    }
    cell.outcome = match best {
        Some((label, d)) if d <= radius => format!("tracks-{label}"),
        _ => "no-track".into(),
    };

    let mut dcfg = DetectConfig::default();
    if let Some(d) = &s.detect {
        if let Some(k) = d.stride {
            dcfg.stride = k;
        }
        if let Some(w) = d.window {
            dcfg.window = w;
        }
    }
    let minima: Vec<MinTrajectory> = case.minima.iter().map(|(_, h)| h.clone()).collect();
    match detect_jumps(problem, &record, &minima, &dcfg) {
        Ok(events) => cell.n_jump_events = events.len(),
        Err(e) => cell.error = Some(format!("jump detection failed: {e}")),
    }
    cell
}

fn run_sweep(ctx: &ExecContext, s: &SweepSpec) -> Result<ExperimentRun> {
    let labels = sweep_refs(s, ctx.trajectory_specs);
    // Problems and branches are rebuilt per parameter value, sequentially;
    // the (alpha, value) cells then run in parallel.
    let cases: Vec<ParamCase> =
        s.param_values.iter().map(|&v| sweep_case(ctx, s, &labels, v)).collect();

    let jobs: Vec<(usize, usize)> = (0..cases.len())
        .flat_map(|pi| (0..s.alphas.len()).map(move |ai| (pi, ai)))
        .collect();
    let cells: Vec<SweepCell> = with_pool(ctx.workers, || {
        jobs.par_iter().map(|&(pi, ai)| sweep_cell(ctx, s, &cases[pi], s.alphas[ai])).collect()
    })?;

    let mut sink = CsvSink::create(ctx.out_dir, &format!("{}.csv", s.label))?;
    let mut header = vec!["alpha".to_string(), s.param.clone(), "outcome".into(), "n_jump_events".into()];
    header.extend(labels.iter().map(|l| format!("dist_{l}")));
    sink.header(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
    for cell in &cells {
        let mut row = vec![
            fmt_float(cell.alpha),
            fmt_float(cell.param_value),
            cell.outcome.clone(),
            cell.n_jump_events.to_string(),
        ];
        row.extend(labels.iter().map(|l| {
            fmt_float(cell.final_distances.get(l).copied().unwrap_or(f64::NAN))
        }));
        sink.row(&row)?;
    }
    let files = vec![
        sink.finish()?,
        write_json(ctx.out_dir, &format!("{}.json", s.label), &cells)?,
    ];

    let n_error = cells.iter().filter(|c| c.error.is_some()).count();
    let mut key_numbers = BTreeMap::new();
    key_numbers.insert("n_cells".into(), cells.len() as f64);
    key_numbers.insert("n_error_cells".into(), n_error as f64);
    let mut verdicts = BTreeMap::new();
    verdicts.insert("all_cells_ok".into(), n_error == 0);

    Ok(ExperimentRun {
        files,
        key_numbers,
        verdicts,
        artifact: ExperimentArtifact::Sweep { label: s.label.clone(), cells },
    })
}

/// Completes a sampled start point on the constraint set by re-solving its
/// first `m` coordinates with damped Newton on the leading Jacobian block.
fn solve_dependent(p: &ProblemDefinition, x: &mut DVector<f64>, t0: f64, tol: f64) -> bool {
    let m = p.m();
    if m == 0 {
        return true;
    }
    for _ in 0..50 {
        let g = p.g(x, t0);
        if g.norm() <= tol {
            return true;
        }
        let jac = p.jac_g(x, t0);
        let block = jac.view((0, 0), (m, m)).into_owned();
        match block.lu().solve(&g) {
            Some(dy) => {
                for k in 0..m {
                    x[k] -= dy[k];
                }
            }
            None => return false,
        }
    }
    p.g(x, t0).norm() <= tol
}

fn basin_row(ctx: &ExecContext, s: &BasinSpec, anchor: &DVector<f64>, index: usize) -> BasinRow {
    let seed_base = s.seed.unwrap_or(ctx.base_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed_base, &s.label, index as u64));
    let feas_tol = eff_feas_tol(ctx.flow);

    let mut aborted = BasinRow {
        index,
        x0: Vec::new(),
        outcome: "aborted".into(),
        max_post_distance: BTreeMap::new(),
    };

    // Sample until the dependent coordinates can be re-solved (constrained
    // problems may have no feasible point over some offsets).
    let mut x0 = None;
    for _ in 0..10 {
        let mut x = anchor.clone();
        for (j, &(lo, hi)) in s.offset_ranges.iter().enumerate() {
            x[j] += if lo == hi { lo } else { rng.random_range(lo..hi) };
        }
        if solve_dependent(ctx.problem, &mut x, s.t0, 0.1 * feas_tol) {
            x0 = Some(x);
            break;
        }
    }
    let Some(x0) = x0 else {
        return aborted;
    };
    aborted.x0 = x0.iter().copied().collect();

    let cfg = match flow_config(ctx.flow, s.alpha) {
        Ok(c) => c,
        Err(_) => return aborted,
    };
    let record = match integrate_pode(ctx.problem, &x0, s.t0, s.t1, &cfg) {
        Ok(r) => r,
        Err(_) => return aborted,
    };
    if !record.completed(s.t1) {
        return aborted;
    }

    let mut max_post_distance = BTreeMap::new();
    for (label, h) in ctx.trajectories {
        let mut worst = 0.0_f64;
        for smp in &record.samples {
            if smp.t >= s.success_time - 1e-12 {
                let x = DVector::from_column_slice(&smp.x);
                worst = worst.max((x - h.h(smp.t)).norm());
            }
        }
        max_post_distance.insert(label.clone(), worst);
    }
    let outcome = max_post_distance
        .iter()
        .find(|(_, &d)| d <= s.success_radius)
        .map(|(l, _)| l.clone())
        .unwrap_or_else(|| "none".into());

    BasinRow { index, x0: x0.iter().copied().collect(), outcome, max_post_distance }
}

fn run_basin(ctx: &ExecContext, s: &BasinSpec) -> Result<ExperimentRun> {
    let anchor = ctx.trajectories[&s.center].h(s.t0);
    let rows: Vec<BasinRow> = with_pool(ctx.workers, || {
        (0..s.n_inits).into_par_iter().map(|i| basin_row(ctx, s, &anchor, i)).collect()
    })?;

    let labels: Vec<&String> = ctx.trajectories.keys().collect();
    let mut sink = CsvSink::create(ctx.out_dir, &format!("{}.csv", s.label))?;
    let n = ctx.problem.n();
    let mut header = vec!["init".to_string()];
    header.extend((1..=n).map(|j| format!("x0_{j}")));
    header.push("outcome".into());
    header.extend(labels.iter().map(|l| format!("maxdist_{l}")));
    sink.header(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
    for row in &rows {
        let mut fields = vec![row.index.to_string()];
        if row.x0.is_empty() {
            fields.extend(std::iter::repeat_n("NaN".to_string(), n));
        } else {
            fields.extend(row.x0.iter().map(|v| fmt_float(*v)));
        }
        fields.push(row.outcome.clone());
        fields.extend(labels.iter().map(|l| {
            fmt_float(row.max_post_distance.get(*l).copied().unwrap_or(f64::NAN))
        }));
        sink.row(&fields)?;
    }
    let files = vec![
        sink.finish()?,
        write_json(ctx.out_dir, &format!("{}.json", s.label), &rows)?,
    ];

    let n_aborted = rows.iter().filter(|r| r.outcome == "aborted").count();
    let mut key_numbers = BTreeMap::new();
    key_numbers.insert("n_inits".into(), rows.len() as f64);
    key_numbers.insert("n_aborted".into(), n_aborted as f64);
    let denom = rows.len().max(1) as f64;
    for label in &labels {
        let frac =
            rows.iter().filter(|r| &r.outcome == *label).count() as f64 / denom;
        key_numbers.insert(format!("fraction_{label}"), frac);
    }
    key_numbers.insert(
        "fraction_none".into(),
        rows.iter().filter(|r| r.outcome == "none").count() as f64 / denom,
    );
    let mut verdicts = BTreeMap::new();
    verdicts.insert("all_completed".into(), n_aborted == 0);

    Ok(ExperimentRun {
        files,
        key_numbers,
        verdicts,
        artifact: ExperimentArtifact::Basin { label: s.label.clone(), rows },
    })
}

#[derive(Serialize)]
struct ConvergenceReport<'a> {
    label: &'a str,
    table: &'a ConvergenceTable,
    proximal_ratios: Vec<f64>,
    euler_ratios: Vec<f64>,
}

fn run_convergence(ctx: &ExecContext, s: &ConvergenceSpec) -> Result<ExperimentRun> {
    let alpha = constant_alpha(ctx.flow, s.alpha)?;
    let x0 = DVector::from_column_slice(&s.x0);
    let table = crate::flow::convergence_experiment(ctx.problem, &x0, alpha, s.t_end, &s.dtau)?;

    let mut sink = CsvSink::create(ctx.out_dir, &format!("{}.csv", s.label))?;
    sink.header(&["dtau", "proximal_error", "euler_error"])?;
    for row in &table.rows {
        sink.row(&[fmt_float(row.dtau), fmt_float(row.proximal_error), fmt_float(row.euler_error)])?;
    }
    let report = ConvergenceReport {
        label: &s.label,
        table: &table,
        proximal_ratios: table.proximal_ratios(),
        euler_ratios: table.euler_ratios(),
    };
    let files = vec![
        sink.finish()?,
        write_json(ctx.out_dir, &format!("{}.json", s.label), &report)?,
    ];

    let mut key_numbers = BTreeMap::new();
    if let Some(r) = report.proximal_ratios.last() {
        key_numbers.insert("proximal_ratio_last".into(), *r);
    }
    if let Some(r) = report.euler_ratios.last() {
        key_numbers.insert("euler_ratio_last".into(), *r);
    }
    if let Some(row) = table.rows.last() {
        key_numbers.insert("proximal_error_finest".into(), row.proximal_error);
        key_numbers.insert("euler_error_finest".into(), row.euler_error);
    }

    Ok(ExperimentRun {
        files,
        key_numbers,
        verdicts: BTreeMap::new(),
        artifact: ExperimentArtifact::Convergence { label: s.label.clone(), table },
    })
}

fn run_certify(ctx: &ExecContext, s: &CertifySpec) -> Result<ExperimentRun> {
    let alpha = constant_alpha(ctx.flow, s.alpha)?;
    let h1 = &ctx.trajectories[&s.h1];
    let h2 = &ctx.trajectories[&s.h2];
    let grid = uniform_time_grid(s.t1, s.t2, s.time_nodes);
    let seed_base = s.seed.unwrap_or(ctx.base_seed);
    let stage_seed = |name: &str| split_seed(seed_base, &format!("{}:{name}", s.label), 0);

    let e1_offsets: Vec<DVector<f64>> = match &s.e1_offsets {
        Some(list) => list.iter().map(|v| DVector::from_column_slice(v)).collect(),
        None => vec![h1.h(s.t1) - h2.h(s.t1)],
    };

    let mut refusals = BTreeMap::new();
    let skip = "skipped: an earlier stage produced no certificate".to_string();

    let convexity = stage(
        &mut refusals,
        "convexity",
        estimate_one_point_convexity(ctx.problem, h2, s.r, &grid, s.n_samples, stage_seed("convexity")),
    )?;

    let region = DominanceRegion::new(s.region.clone(), s.r);
    let dominance = stage(
        &mut refusals,
        "dominance",
        check_dominance(
            ctx.problem,
            h1,
            h2,
            alpha,
            s.t1,
            s.t2,
            &region,
            s.v,
            s.n_samples,
            stage_seed("dominance"),
            s.mode,
        ),
    )?;

    let jump = match &dominance {
        Some(dom) => match s.mode {
            DominanceMode::Uniform => {
                let theta = s.theta.expect("validated: uniform mode has theta");
                stage(&mut refusals, "jump", jump_certificate(dom, &e1_offsets, theta))?
            }
            DominanceMode::Averaged => {
                let cfg = PerturbationProbeConfig {
                    n_samples: s.n_samples,
                    quad_nodes: s.quad_nodes.unwrap_or(64),
                    seed: stage_seed("jump"),
                };
                stage(
                    &mut refusals,
                    "jump",
                    jump_certificate_averaged(ctx.problem, h2, dom, &e1_offsets, &cfg),
                )?
            }
        },
        None => {
            refusals.insert("jump".into(), skip.clone());
            None
        }
    };

    let tracking = match &convexity {
        Some(conv) => stage(
            &mut refusals,
            "tracking",
            tracking_certificate(ctx.problem, h2, alpha, conv, &grid, s.n_samples, stage_seed("tracking")),
        )?,
        None => {
            refusals.insert("tracking".into(), skip.clone());
            None
        }
    };

    let escape = match (&jump, &tracking) {
        (Some(j), Some(tr)) => stage(&mut refusals, "escape", escape_certificate(j, tr))?,
        _ => {
            refusals.insert("escape".into(), skip.clone());
            None
        }
    };

    let shallowness = match s.shallow_delta {
        Some(delta) => {
            let cfg = RaProbeConfig { seed: stage_seed("shallow"), ..RaProbeConfig::default() };
            stage(
                &mut refusals,
                "shallowness",
                shallowness_check(ctx.problem, h1, alpha, s.t1, delta, &cfg),
            )?
        }
        None => None,
    };

    let bundle = CertifyBundle {
        h1: s.h1.clone(),
        h2: s.h2.clone(),
        alpha,
        t1: s.t1,
        t2: s.t2,
        e1_offsets: e1_offsets.iter().map(|e| e.iter().copied().collect()).collect(),
        convexity,
        dominance,
        jump,
        tracking,
        escape,
        shallowness,
        refusals,
        grade: EVIDENCE_GRADE,
    };

    // Flat stage/key/value table for quick inspection next to the full JSON.
    let mut sink = CsvSink::create(ctx.out_dir, &format!("{}.csv", s.label))?;
    sink.header(&["stage", "key", "value"])?;
    let mut put = |stage: &str, key: &str, value: f64| -> Result<()> {
        sink.row(&[stage.to_string(), key.to_string(), fmt_float(value)])
    };
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    if let Some(c) = &bundle.convexity {
        put("convexity", "c_hat", c.c_hat)?;
        put("convexity", "r", c.r)?;
        put("convexity", "n_used", c.n_used as f64)?;
        put("convexity", "valid", flag(c.valid))?;
    }
    if let Some(d) = &bundle.dominance {
        put("dominance", "w_hat", d.w_hat)?;
        put("dominance", "rho", d.rho)?;
        put("dominance", "max_outward_component", d.max_outward_component)?;
        put("dominance", "invariance_ok", flag(d.invariance_ok))?;
        put("dominance", "covers_seed_ball", flag(d.covers_seed_ball))?;
        put("dominance", "covers_rho_ball", flag(d.covers_rho_ball))?;
        put("dominance", "valid", flag(d.valid))?;
    }
    if let Some(j) = &bundle.jump {
        put("jump", "required_interval", j.required_interval)?;
        put("jump", "actual_interval", j.actual_interval)?;
        put("jump", "worst_start_distance", j.worst_start_distance)?;
        put("jump", "valid", flag(j.valid))?;
    }
    if let Some(tr) = &bundle.tracking {
        put("tracking", "alpha_max", tr.alpha_max)?;
        put("tracking", "eta1", tr.eta1)?;
        put("tracking", "eta2", tr.eta2)?;
        put("tracking", "decay_rate", tr.decay_rate)?;
        put("tracking", "initial_radius", tr.initial_radius)?;
        put("tracking", "valid", flag(tr.valid))?;
    }
    if let Some(e) = &bundle.escape {
        put("escape", "valid", flag(e.valid))?;
    }
    if let Some(sh) = &bundle.shallowness {
        put("shallowness", "epsilon", sh.epsilon)?;
        put("shallowness", "ra_radius", sh.ra_radius)?;
        put("shallowness", "e_alpha", sh.e_alpha)?;
        put("shallowness", "shallow", flag(sh.shallow))?;
    }
    let files = vec![
        sink.finish()?,
        write_json(ctx.out_dir, &format!("{}.json", s.label), &bundle)?,
    ];

    let mut key_numbers = BTreeMap::new();
    if let Some(c) = &bundle.convexity {
        key_numbers.insert("c_hat".into(), c.c_hat);
    }
    if let Some(d) = &bundle.dominance {
        key_numbers.insert("w_hat".into(), d.w_hat);
        key_numbers.insert("rho".into(), d.rho);
    }
    if let Some(j) = &bundle.jump {
        key_numbers.insert("required_interval".into(), j.required_interval);
        key_numbers.insert("actual_interval".into(), j.actual_interval);
    }
    if let Some(tr) = &bundle.tracking {
        key_numbers.insert("alpha_max".into(), tr.alpha_max);
    }
    let mut verdicts = BTreeMap::new();
    verdicts.insert("convexity_valid".into(), bundle.convexity.as_ref().map(|c| c.valid).unwrap_or(false));
    verdicts.insert("dominance_valid".into(), bundle.dominance.as_ref().map(|d| d.valid).unwrap_or(false));
    verdicts.insert("jump_valid".into(), bundle.jump.as_ref().map(|j| j.valid).unwrap_or(false));
    verdicts.insert("tracking_valid".into(), bundle.tracking.as_ref().map(|t| t.valid).unwrap_or(false));
    verdicts.insert("escape_valid".into(), bundle.escape.as_ref().map(|e| e.valid).unwrap_or(false));
    if let Some(sh) = &bundle.shallowness {
        verdicts.insert("shallow".into(), sh.shallow);
    }

    Ok(ExperimentRun {
        files,
        key_numbers,
        verdicts,
        artifact: ExperimentArtifact::Certify { label: s.label.clone(), bundle: Box::new(bundle) },
    })
}

fn run_landscape(ctx: &ExecContext, s: &LandscapeSpec) -> Result<ExperimentRun> {
    let alpha = s.alpha.or(ctx.flow.alpha).ok_or_else(|| TvError::InvalidParameter {
        name: "alpha".into(),
        reason: "landscape slices need an inertia (their own or flow.alpha)".into(),
    })?;
    let href = &ctx.trajectories[&s.reference];
    let points = s.e_grid.points();

    let n = ctx.problem.n();
    let mut sink = CsvSink::create(ctx.out_dir, &format!("{}.csv", s.label))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|j| format!("e{j}")));
    header.push("value".into());
    sink.header(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
    for &t in &s.t_list {
        let vals = reshaped_landscape(ctx.problem, href, t, alpha, &points)?;
        for (e, v) in &vals {
            let mut row = vec![fmt_float(t)];
            row.extend(e.iter().map(|c| fmt_float(*c)));
            row.push(fmt_float(*v));
            sink.row(&row)?;
        }
    }
    let files = vec![sink.finish()?];

    let mut key_numbers = BTreeMap::new();
    key_numbers.insert("n_rows".into(), (points.len() * s.t_list.len()) as f64);

    Ok(ExperimentRun {
        files,
        key_numbers,
        verdicts: BTreeMap::new(),
        artifact: ExperimentArtifact::Landscape { label: s.label.clone() },
    })
}
