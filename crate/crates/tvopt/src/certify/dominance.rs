//! Equilibrium branch of the offset field `U` and the sampled dominance
//! certificate: one-point monotonicity of `U` toward that branch over a
//! region, plus evidence that the region traps the offset dynamics.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    retract_offset, sample_ball, uniform_time_grid, DominanceRegion, MinRatioPoint, OffsetSample,
    EVIDENCE_GRADE,
};
use crate::error::{Result, TvError};
use crate::flow::{integrate_pode, FlowConfig, RetractionMode};
use crate::geometry::{error_field_u, evaluate_geometry};
use crate::problem::{MinTrajectory, ProblemDefinition};

/// Maximum admissible condition number of the finite-difference Jacobian of
/// the stationarity system along the continuation.
pub const EQUILIBRIUM_COND_LIMIT: f64 = 1e8;

/// Time nodes used for the dominance sampling grid on `[t1, t2]`.
const DOM_TIME_NODES: usize = 33;

/// Quadrature nodes for time averages of the offset field.
const AVG_QUAD_NODES: usize = 64;

/// Boundary probes per time node for the invariance sign test.
const BOUNDARY_PROBES_PER_NODE: usize = 16;

/// Boundary-seeded offset trajectories integrated for the containment test.
const BOUNDARY_TRAJECTORIES: usize = 100;

/// Continuation samples of the offset-field equilibrium `ebar(t)`.
#[derive(Debug, Clone)]
pub struct EquilibriumBranch {
    pub times: Vec<f64>,
    pub points: Vec<DVector<f64>>,
    /// `max over the grid of |ebar(t)|`.
    pub rho: f64,
    /// Worst Jacobian condition number met along the continuation.
    pub max_condition: f64,
    /// Other zeros found by random restarts, as `(t, e)` pairs; the
    /// continuation makes no exhaustiveness claim.
    pub extra_zeros: Vec<(f64, Vec<f64>)>,
}

/// The square stationarity system whose roots are the offsets where the
/// field `U` vanishes on the feasible set: the tangent part of `U` stacked
/// (through the projector) with the constraint violation mapped back through
/// the right inverse. For unconstrained problems this is `U` itself.
fn stationarity_system(
    p: &ProblemDefinition,
    h2: &MinTrajectory,
    alpha: f64,
    e: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    let u = error_field_u(p, e, t, alpha, h2)?;
    if p.m() == 0 {
        return Ok(u);
    }
    let x = e + h2.h(t);
    let geo = evaluate_geometry(p, &x, t, alpha)?;
    let g = p.g_checked(&x, t)?;
    Ok(&geo.p * u + &geo.q * g)
}

/// Same, averaged over `[t1, t2]` by trapezoid quadrature with the geometry
/// anchored at `t1`.
fn stationarity_system_averaged(
    p: &ProblemDefinition,
    h2: &MinTrajectory,
    alpha: f64,
    e: &DVector<f64>,
    tau_grid: &[f64],
) -> Result<DVector<f64>> {
    let u = average_offset_field(p, h2, alpha, e, tau_grid)?;
    if p.m() == 0 {
        return Ok(u);
    }
    let t1 = tau_grid[0];
    let x = e + h2.h(t1);
    let geo = evaluate_geometry(p, &x, t1, alpha)?;
    let g = p.g_checked(&x, t1)?;
    Ok(&geo.p * u + &geo.q * g)
}

/// Trapezoid average of the offset field `U(e, ., alpha)` over a time grid.
pub(crate) fn average_offset_field(
    p: &ProblemDefinition,
    h2: &MinTrajectory,
    alpha: f64,
    e: &DVector<f64>,
    tau_grid: &[f64],
) -> Result<DVector<f64>> {
    let span = tau_grid.last().unwrap() - tau_grid[0];
    let mut acc = DVector::zeros(p.n());
    for w in tau_grid.windows(2) {
        let u0 = error_field_u(p, e, w[0], alpha, h2)?;
        let u1 = error_field_u(p, e, w[1], alpha, h2)?;
        acc += (u0 + u1) * (0.5 * (w[1] - w[0]));
    }
    Ok(acc / span)
}

/// Central-difference Jacobian of a vector field over offsets.
fn fd_jacobian(
    field: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    e: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = e.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut ep = e.clone();
        let mut em = e.clone();
        ep[j] += step;
        em[j] -= step;
        let col = (field(&ep)? - field(&em)?) / (2.0 * step);
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Damped Newton iteration on a square offset system with a Jacobian
/// condition check at every iterate. Returns the root and the worst
/// condition number observed.
fn newton_root(
    field: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    e0: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(DVector<f64>, f64)> {
    let mut e = e0.clone();
    let mut fv = field(&e)?;
    let mut worst_cond = 1.0_f64;
    for _ in 0..max_iters {
        if fv.norm() <= tol {
            return Ok((e, worst_cond));
        }
        let step = 1e-6 * (1.0 + e.norm());
        let jac = fd_jacobian(field, &e, step)?;
        let svd = jac.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        worst_cond = worst_cond.max(cond);
        if !(cond <= EQUILIBRIUM_COND_LIMIT) {
            return Err(TvError::NoEquilibriumBranch {
                reason: format!("stationarity Jacobian is near-singular (condition {cond:.3e})"),
            });
        }
        let delta = jac.lu().solve(&fv).ok_or_else(|| TvError::NoEquilibriumBranch {
            reason: "stationarity Jacobian factorization failed".into(),
        })?;
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..25 {
            let trial = &e - &delta * lam;
            match field(&trial) {
                Ok(ft) if ft.norm() < fv.norm() => {
                    e = trial;
                    fv = ft;
                    accepted = true;
                    break;
                }
                _ => lam *= 0.5,
            }
        }
        if !accepted {
            return Err(TvError::NoEquilibriumBranch {
                reason: format!("Newton stalled at residual {:.3e}", fv.norm()),
            });
        }
    }
    if fv.norm() <= tol {
        Ok((e, worst_cond))
    } else {
        Err(TvError::NoEquilibriumBranch {
            reason: format!("Newton did not reach residual {tol:.1e} (got {:.3e})", fv.norm()),
        })
    }
}

const EQ_TOL: f64 = 1e-10;

/// Random feasible offsets in the `r`-ball used to probe for zeros other
/// than the continuation branch.
fn probe_extra_zeros(
    field: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    p: &ProblemDefinition,
    base: &DVector<f64>,
    t: f64,
    r: f64,
    known: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let mut found: Vec<DVector<f64>> = Vec::new();
    for _ in 0..50 {
        let raw = sample_ball(rng, p.n(), r);
        let e0 = match retract_offset(p, base, t, &raw, |e| e.norm() <= r) {
            Ok(OffsetSample::Feasible(e)) => e,
            _ => continue,
        };
        let root = match newton_root(field, &e0, EQ_TOL, 30) {
            Ok((z, _)) => z,
            Err(_) => continue,
        };
        if root.norm() >= r || (&root - known).norm() <= 1e-6 * (1.0 + r) {
            continue;
        }
        if found.iter().all(|z| (z - &root).norm() > 1e-6 * (1.0 + r)) {
            found.push(root);
        }
    }
    found.into_iter().map(|z| z.iter().copied().collect()).collect()
}

/// Follows the equilibrium `U(ebar(t), t, alpha) = 0` over `t_grid` by warm-
/// started Newton continuation from `ebar = 0`, returning the samples and
/// `rho = max |ebar|`. Fails if the branch leaves the `r2`-ball, if the
/// finite-difference Jacobian becomes ill-conditioned, or if Newton stalls.
pub fn equilibrium_branch(
    p: &ProblemDefinition,
    h2: &MinTrajectory,
    alpha: f64,
    t_grid: &[f64],
    r2: f64,
) -> Result<EquilibriumBranch> {
    super::validate_time_grid(t_grid)?;
    if !(alpha > 0.0) {
        return Err(TvError::InvalidParameter {
            name: "alpha".into(),
            reason: format!("inertia must be positive, got {alpha}"),
        });
    }
    if !(r2 > 0.0 && r2.is_finite()) {
        return Err(TvError::InvalidParameter {
            name: "r2".into(),
            reason: format!("target radius must be finite and positive, got {r2}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x45b5);
    let mut times = Vec::with_capacity(t_grid.len());
    let mut points: Vec<DVector<f64>> = Vec::with_capacity(t_grid.len());
    let mut rho = 0.0_f64;
    let mut max_condition = 1.0_f64;
    let mut extra_zeros = Vec::new();
    let probe_idx = [0, t_grid.len() / 2, t_grid.len() - 1];

    for (i, &t) in t_grid.iter().enumerate() {
        let field = move |e: &DVector<f64>| stationarity_system(p, h2, alpha, e, t);
        let seed = points.last().cloned().unwrap_or_else(|| DVector::zeros(p.n()));
        let (ebar, cond) = newton_root(&field, &seed, EQ_TOL, 60)?;
        max_condition = max_condition.max(cond);
        if ebar.norm() >= r2 {
            return Err(TvError::NoEquilibriumBranch {
                reason: format!(
                    "equilibrium offset reaches |ebar| = {:.6e} >= r2 = {r2} at t = {t}",
                    ebar.norm()
                ),
            });
        }
        rho = rho.max(ebar.norm());
        if probe_idx.contains(&i) {
            let base = h2.h(t);
            for z in probe_extra_zeros(&field, p, &base, t, r2, &ebar, &mut rng) {
                extra_zeros.push((t, z));
            }
        }
        times.push(t);
        points.push(ebar);
    }
    Ok(EquilibriumBranch { times, points, rho, max_condition, extra_zeros })
}

/// Equilibrium of the time-averaged offset field over `[t1, t2]`: a single
/// offset `ebar` with `U_av(ebar, alpha) = 0`, found by Newton from 0.
/// Returns `(ebar, |ebar|, worst condition)`.
pub fn equilibrium_averaged(
    p: &ProblemDefinition,
    h2: &MinTrajectory,
    alpha: f64,
    t1: f64,
    t2: f64,
    r2: f64,
    quad_nodes: usize,
) -> Result<(DVector<f64>, f64, f64)> {
    if !(t2 > t1) {
        return Err(TvError::InvalidParameter {
            name: "t2".into(),
            reason: format!("need t2 > t1, got [{t1}, {t2}]"),
        });
    }
    let tau = uniform_time_grid(t1, t2, quad_nodes.max(AVG_QUAD_NODES));
    let field = move |e: &DVector<f64>| stationarity_system_averaged(p, h2, alpha, e, &tau);
    let (ebar, cond) = newton_root(&field, &DVector::zeros(p.n()), EQ_TOL, 60)?;
    if ebar.norm() >= r2 {
        return Err(TvError::NoEquilibriumBranch {
            reason: format!("averaged equilibrium offset |ebar| = {:.6e} >= r2 = {r2}", ebar.norm()),
        });
    }
    Ok((ebar.clone(), ebar.norm(), cond))
}

/// Whether the dominance condition is checked against the instantaneous
/// field at every grid time or against its time average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DominanceMode {
    Uniform,
    Averaged,
}

/// Evidence that `h2` dominates `h1` over the offset region `D`: the field
/// `U` (or its average) points toward the equilibrium branch at rate
/// `w_hat`, and `D` traps the offset dynamics over `[t1, t2]`.
#[derive(Debug, Clone, Serialize)]
pub struct DominanceCertificate {
    pub h1_label: String,
    pub h2_label: String,
    pub alpha: f64,
    pub t1: f64,
    pub t2: f64,
    pub region: DominanceRegion,
    /// Radius of the offset ball around `h1` whose points the certificate is
    /// meant to cover.
    pub v: f64,
    pub mode: DominanceMode,
    /// Bound on the equilibrium offset norm over the window.
    pub rho: f64,
    /// Minimum sampled ratio `<U, e - ebar> / |e - ebar|^2`.
    pub w_hat: f64,
    pub w_hat_point: MinRatioPoint,
    /// Equilibrium offsets at the window ends (identical in averaged mode).
    pub ebar_t1: Vec<f64>,
    pub ebar_t2: Vec<f64>,
    pub extra_zeros: Vec<(f64, Vec<f64>)>,
    pub max_jacobian_condition: f64,
    /// Outcome of the boundary vector-field sign test.
    pub sign_test_ok: bool,
    /// Worst outward component of the offset velocity seen on the boundary.
    pub max_outward_component: f64,
    /// Outcome of the boundary-seeded trajectory containment test.
    pub trajectories_ok: bool,
    pub n_boundary_escapes: usize,
    /// Conjunction of the two boundary tests.
    pub invariance_ok: bool,
    /// Whether `D` contains the `v`-ball around the `h1` offsets on the grid.
    pub covers_seed_ball: bool,
    /// Whether `D` contains the ball of radius `rho` around the origin.
    pub covers_rho_ball: bool,
    pub n_samples: usize,
    pub n_retraction_failures: usize,
    pub n_time_nodes: usize,
    pub seed: u64,
    /// True exactly when `w_hat > 0`, the invariance tests pass, and
    /// `rho < r2`.
    pub valid: bool,
    pub grade: &'static str,
}

/// A feasible offset on the boundary of the region at time `t`, found by
/// bisecting along the image of a ray on the feasible set, plus the region's
/// active outward normals there. `None` when the probe was inconclusive.
fn boundary_offset(
    p: &ProblemDefinition,
    h2: &MinTrajectory,
    t: f64,
    region: &DominanceRegion,
    anchor: &DVector<f64>,
    dir: &DVector<f64>,
) -> Result<Option<(DVector<f64>, Vec<DVector<f64>>)>> {
    let base = h2.h(t);
    let scale = region.shape.scale();
    // psi(s): feasible offset obtained by retracting the ray point; inside(s)
    // means "retraction succeeded and landed in the region".
    let eval = |s: f64| -> Result<Option<DVector<f64>>> {
        let raw = anchor + dir * s;
        Ok(match retract_offset(p, &base, t, &raw, |_| true)? {
            OffsetSample::Feasible(e) => Some(e),
            _ => None,
        })
    };
    let inside = |e: &Option<DVector<f64>>| e.as_ref().map(|e| region.shape.contains(e)).unwrap_or(false);

    let mut s_lo = 0.0_f64;
    let mut e_lo = eval(0.0)?;
    if !inside(&e_lo) {
        return Ok(None);
    }
    let mut s_hi = 0.05 * scale;
    let mut exited = false;
    for _ in 0..12 {
        let e_hi = eval(s_hi)?;
        if !inside(&e_hi) {
            exited = true;
            break;
        }
        s_lo = s_hi;
        e_lo = e_hi;
        s_hi *= 2.0;
    }
    if !exited {
        return Ok(None);
    }
    for _ in 0..45 {
        let mid = 0.5 * (s_lo + s_hi);
        let e_mid = eval(mid)?;
        if inside(&e_mid) {
            s_lo = mid;
            e_lo = e_mid;
        } else {
            s_hi = mid;
        }
    }
    let e_b = match e_lo {
        Some(e) => e,
        None => return Ok(None),
    };
    let normals = region.shape.active_outward_normals(&e_b, 1e-7 * (1.0 + scale));
    if normals.is_empty() {
        return Ok(None);
    }
    Ok(Some((e_b, normals)))
}

/// Checks dominance of `h2` over `[t1, t2]`: estimates the monotonicity
/// modulus `w_hat` of the offset field toward its equilibrium branch by
/// sampling feasible offsets in `D` (`n_samples` per grid time in uniform
/// mode, `n_samples` total in averaged mode), and tests invariance of `D`
/// with a boundary sign test plus boundary-seeded trajectory containment.
#[allow(clippy::too_many_arguments)]
pub fn check_dominance(
    p: &ProblemDefinition,
    h1: &MinTrajectory,
    h2: &MinTrajectory,
    alpha: f64,
    t1: f64,
    t2: f64,
    region: &DominanceRegion,
    v: f64,
    n_samples: usize,
    rng_seed: u64,
    mode: DominanceMode,
) -> Result<DominanceCertificate> {
    let n = p.n();
    region.validate(n)?;
    if !(alpha > 0.0) {
        return Err(TvError::InvalidParameter {
            name: "alpha".into(),
            reason: format!("inertia must be positive, got {alpha}"),
        });
    }
    if !(t2 > t1) {
        return Err(TvError::InvalidParameter {
            name: "t2".into(),
            reason: format!("need t2 > t1, got [{t1}, {t2}]"),
        });
    }
    if !(v >= 0.0 && v.is_finite()) {
        return Err(TvError::InvalidParameter {
            name: "v".into(),
            reason: format!("seed-ball radius must be finite and non-negative, got {v}"),
        });
    }
    if n_samples == 0 {
        return Err(TvError::InvalidParameter {
            name: "n_samples".into(),
            reason: "need at least one sample".into(),
        });
    }
    if h1.dim() != n || h2.dim() != n {
        return Err(TvError::InvalidParameter {
            name: "h1/h2".into(),
            reason: format!("trajectory dimensions must match the problem dimension {n}"),
        });
    }

    let t_grid = uniform_time_grid(t1, t2, DOM_TIME_NODES);
    let tau_grid = uniform_time_grid(t1, t2, AVG_QUAD_NODES);
    let r2 = region.r2;

    // Equilibrium branch of the (possibly averaged) offset field.
    let (ebar_at, rho, max_condition, extra_zeros): (Box<dyn Fn(usize) -> DVector<f64>>, f64, f64, _) =
        match mode {
            DominanceMode::Uniform => {
                let branch = equilibrium_branch(p, h2, alpha, &t_grid, r2)?;
                let pts = branch.points.clone();
                (
                    Box::new(move |i: usize| pts[i].clone()),
                    branch.rho,
                    branch.max_condition,
                    branch.extra_zeros,
                )
            }
            DominanceMode::Averaged => {
                let (ebar, rho, cond) = equilibrium_averaged(p, h2, alpha, t1, t2, r2, AVG_QUAD_NODES)?;
                (Box::new(move |_i: usize| ebar.clone()), rho, cond, Vec::new())
            }
        };

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let scale = region.shape.scale();
    let mut worst: Option<(f64, DVector<f64>, f64)> = None;
    let mut retraction_failures = 0usize;
    let mut attempts = 0usize;

    // Monotonicity modulus: min ratio over feasible samples in the region.
    let sample_nodes: Vec<usize> = match mode {
        DominanceMode::Uniform => (0..t_grid.len()).collect(),
        DominanceMode::Averaged => vec![0],
    };
    for &i in &sample_nodes {
        let t = t_grid[i];
        let base = h2.h(t);
        let ebar = ebar_at(i);
        let mut kept = 0usize;
        let mut node_attempts = 0usize;
        let cap = 60 * n_samples;
        while kept < n_samples && node_attempts < cap {
            node_attempts += 1;
            attempts += 1;
            let raw = region.shape.sample(&mut rng);
            let e = match retract_offset(p, &base, t, &raw, |e| region.shape.contains(e))? {
                OffsetSample::Feasible(e) => e,
                OffsetSample::RetractionFailed => {
                    retraction_failures += 1;
                    continue;
                }
                OffsetSample::Rejected => continue,
            };
            let d = &e - &ebar;
            if d.norm() < 1e-9 * (1.0 + scale) {
                continue;
            }
            let u = match mode {
                DominanceMode::Uniform => error_field_u(p, &e, t, alpha, h2)?,
                DominanceMode::Averaged => average_offset_field(p, h2, alpha, &e, &tau_grid)?,
            };
            let ratio = u.dot(&d) / d.norm_squared();
            if worst.as_ref().map(|(w, _, _)| ratio < *w).unwrap_or(true) {
                worst = Some((ratio, e.clone(), t));
            }
            kept += 1;
        }
    }
    if 2 * retraction_failures > attempts {
        return Err(TvError::SamplingFailure {
            context: "dominance modulus estimate".into(),
            reason: format!("{retraction_failures} of {attempts} sample retractions failed"),
        });
    }
    let (w_hat, w_e, w_t) = worst.ok_or(TvError::SamplingFailure {
        context: "dominance modulus estimate".into(),
        reason: "no feasible offset sample landed in the region".into(),
    })?;

    // Invariance, part (a): the offset velocity -U/alpha must not point out
    // of the region at feasible boundary points.
    let mut sign_test_ok = true;
    let mut max_outward = f64::NEG_INFINITY;
    let mut boundary_points_t1: Vec<DVector<f64>> = Vec::new();
    let mut probes_used = 0usize;
    let mut probes_tried = 0usize;
    for (i, &t) in t_grid.iter().enumerate() {
        let ebar = ebar_at(i);
        let anchor = if region.shape.contains(&ebar) { ebar } else { region.shape.center() };
        for _ in 0..BOUNDARY_PROBES_PER_NODE {
            probes_tried += 1;
            let dir = super::sample_unit_vector(&mut rng, n);
            let Some((e_b, normals)) = boundary_offset(p, h2, t, region, &anchor, &dir)? else {
                continue;
            };
            probes_used += 1;
            let u = error_field_u(p, &e_b, t, alpha, h2)?;
            let vel = -&u / alpha;
            for nu in &normals {
                let out = vel.dot(nu);
                max_outward = max_outward.max(out);
                if out > 1e-7 * (1.0 + vel.norm()) {
                    sign_test_ok = false;
                }
            }
            if i == 0 && boundary_points_t1.len() < BOUNDARY_TRAJECTORIES {
                boundary_points_t1.push(e_b);
            }
        }
    }
    if probes_used * 2 < probes_tried {
        return Err(TvError::SamplingFailure {
            context: "dominance invariance sign test".into(),
            reason: format!("only {probes_used} of {probes_tried} boundary probes were usable"),
        });
    }

    // Invariance, part (b): offset trajectories seeded on the boundary at t1
    // must stay in the (slightly inflated) region until t2.
    while boundary_points_t1.len() < BOUNDARY_TRAJECTORIES {
        let anchor = {
            let ebar = ebar_at(0);
            if region.shape.contains(&ebar) { ebar } else { region.shape.center() }
        };
        let dir = super::sample_unit_vector(&mut rng, n);
        match boundary_offset(p, h2, t1, region, &anchor, &dir)? {
            Some((e_b, _)) => boundary_points_t1.push(e_b),
            None => {
                // Keep the loop finite even on pathological regions.
                if boundary_points_t1.is_empty() {
                    return Err(TvError::SamplingFailure {
                        context: "dominance invariance trajectories".into(),
                        reason: "no feasible boundary seed found at t1".into(),
                    });
                }
                let copy = boundary_points_t1[boundary_points_t1.len() % boundary_points_t1.len().max(1)].clone();
                boundary_points_t1.push(copy);
            }
        }
    }
    let mut trajectories_ok = true;
    let mut escapes = 0usize;
    let flow_cfg = {
        let base = FlowConfig::new(alpha).with_dt(1e-3).with_record_stride(5);
        if p.m() > 0 { base.with_retraction(RetractionMode::Newton) } else { base }
    };
    let slack = 1e-6 * (1.0 + scale);
    for e_b in &boundary_points_t1 {
        let x0 = e_b + h2.h(t1);
        let rec = integrate_pode(p, &x0, t1, t2, &flow_cfg)?;
        let mut contained = rec.completed(t2);
        if contained {
            for s in &rec.samples {
                let e = DVector::from_column_slice(&s.x) - h2.h(s.t);
                if !region.shape.contains_with_slack(&e, slack) {
                    contained = false;
                    break;
                }
            }
        }
        if !contained {
            escapes += 1;
            trajectories_ok = false;
        }
    }

    let invariance_ok = sign_test_ok && trajectories_ok;

    // Coverage of the structures the region is supposed to contain; reported
    // as evidence about the user-chosen region, not folded into validity.
    let covers_seed_ball = t_grid.iter().all(|&t| {
        let off = h1.h(t) - h2.h(t);
        region.shape.contains_ball(&off, v)
    });
    let covers_rho_ball = region.shape.contains_ball(&DVector::zeros(n), rho);

    let ebar_t1: Vec<f64> = ebar_at(0).iter().copied().collect();
    let ebar_t2: Vec<f64> = ebar_at(t_grid.len() - 1).iter().copied().collect();
    let valid = w_hat > 0.0 && invariance_ok && rho < r2;

    Ok(DominanceCertificate {
        h1_label: h1.label().to_string(),
        h2_label: h2.label().to_string(),
        alpha,
        t1,
        t2,
        region: region.clone(),
        v,
        mode,
        rho,
        w_hat,
        w_hat_point: MinRatioPoint { e: w_e.iter().copied().collect(), t: w_t },
        ebar_t1,
        ebar_t2,
        extra_zeros,
        max_jacobian_condition: max_condition,
        sign_test_ok,
        max_outward_component: max_outward,
        trajectories_ok,
        n_boundary_escapes: escapes,
        invariance_ok,
        covers_seed_ball,
        covers_rho_ball,
        n_samples,
        n_retraction_failures: retraction_failures,
        n_time_nodes: t_grid.len(),
        seed: rng_seed,
        valid,
        grade: EVIDENCE_GRADE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::RegionShape;
    use crate::problem::{builtin_quartic, builtin_tracking_quadratic};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn quadratic_min() -> MinTrajectory {
        MinTrajectory::analytic(
            "center",
            1,
            |t: f64| DVector::from_vec(vec![t.sin()]),
            |t: f64| DVector::from_vec(vec![t.cos()]),
        )
    }

    #[test]
    fn time_invariant_problem_has_zero_equilibrium() {
        let p = builtin_quartic(0.0);
        let h2 = MinTrajectory::analytic("global", 1, |_t| DVector::from_vec(vec![-2.0]), |_t| DVector::zeros(1));
        let grid: Vec<f64> = (0..5).map(|i| i as f64 * 0.3).collect();
        let branch = equilibrium_branch(&p, &h2, 0.2, &grid, 0.5).unwrap();
        assert!(branch.rho <= 1e-9, "rho = {}", branch.rho);
        assert!(branch.extra_zeros.is_empty());
    }

    #[test]
    fn moving_quadratic_equilibrium_matches_the_closed_form() {
        // U = e + alpha cos t for the unit-curvature moving well, so the
        // branch is ebar(t) = -alpha cos t and rho = alpha.
        let p = builtin_tracking_quadratic(1.0).unwrap();
        let h2 = quadratic_min();
        let alpha = 0.17;
        let grid: Vec<f64> = (0..=16).map(|i| i as f64 * PI / 8.0).collect();
        let branch = equilibrium_branch(&p, &h2, alpha, &grid, 0.5).unwrap();
        for (t, e) in branch.times.iter().zip(&branch.points) {
            assert_abs_diff_eq!(e[0], -alpha * t.cos(), epsilon = 1e-8);
        }
        assert_abs_diff_eq!(branch.rho, alpha, epsilon = 1e-8);
    }

    #[test]
    fn averaged_equilibrium_of_the_moving_quadratic_matches_quadrature() {
        // U_av(e) = e + (alpha / (t2-t1)) integral of cos; over [0, pi] the
        // integral vanishes, so ebar = 0.
        let p = builtin_tracking_quadratic(1.0).unwrap();
        let h2 = quadratic_min();
        let (ebar, rho, _cond) = equilibrium_averaged(&p, &h2, 0.3, 0.0, PI, 0.5, 64).unwrap();
        assert_abs_diff_eq!(ebar[0], 0.0, epsilon = 1e-9);
        assert!(rho < 1e-9);
    }

    #[test]
    fn branch_leaving_the_target_ball_is_refused() {
        let p = builtin_tracking_quadratic(1.0).unwrap();
        let h2 = quadratic_min();
        // rho would be alpha = 0.4 >= r2 = 0.3.
        let grid: Vec<f64> = (0..=8).map(|i| i as f64 * PI / 4.0).collect();
        let err = equilibrium_branch(&p, &h2, 0.4, &grid, 0.3).unwrap_err();
        assert!(matches!(err, TvError::NoEquilibriumBranch { .. }), "{err}");
    }

    #[test]
    fn moving_quadratic_ball_region_is_dominant_with_unit_modulus() {
        let p = builtin_tracking_quadratic(1.0).unwrap();
        let h2 = quadratic_min();
        let h1 = MinTrajectory::analytic("other", 1, |t: f64| DVector::from_vec(vec![t.sin() + 0.2]), |t: f64| {
            DVector::from_vec(vec![t.cos()])
        });
        let region = DominanceRegion::new(RegionShape::Ball { center: vec![0.0], radius: 0.5 }, 0.4);
        let cert = check_dominance(&p, &h1, &h2, 0.1, 0.0, PI / 2.0, &region, 0.05, 200, 5, DominanceMode::Uniform)
            .unwrap();
        assert!(cert.valid, "w_hat {} invariance {} rho {}", cert.w_hat, cert.invariance_ok, cert.rho);
        assert_abs_diff_eq!(cert.w_hat, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cert.rho, 0.1, epsilon = 1e-8);
        assert!(cert.covers_seed_ball && cert.covers_rho_ball);
    }

    #[test]
    fn double_well_region_spanning_both_basins_is_not_dominant() {
        let p = builtin_quartic(5.0);
        let h2 = MinTrajectory::analytic(
            "global",
            1,
            |t: f64| DVector::from_vec(vec![-2.0 + 5.0 * t.sin()]),
            |t: f64| DVector::from_vec(vec![5.0 * t.cos()]),
        );
        let h1 = MinTrajectory::analytic(
            "local-1",
            1,
            |t: f64| DVector::from_vec(vec![1.0 + 5.0 * t.sin()]),
            |t: f64| DVector::from_vec(vec![5.0 * t.cos()]),
        );
        let region = DominanceRegion::new(RegionShape::Box { lower: vec![-0.5], upper: vec![3.5] }, 0.45);
        let cert = check_dominance(&p, &h1, &h2, 0.1, -0.1, 0.1, &region, 0.05, 300, 9, DominanceMode::Uniform)
            .unwrap();
        assert!(!cert.valid);
        assert!(cert.w_hat < 0.0, "w_hat = {}", cert.w_hat);
    }
}
