//! Sampled numerical certificates for the flow's qualitative behavior:
//! one-point convexity moduli, shallowness of a minimizer branch, dominance
//! of one branch over a region, and the jump / tracking / escape conditions
//! built from them.
//!
//! Every certificate here is Monte-Carlo / grid evidence, not proof: the
//! underlying conditions quantify over continuums and are only sampled.
//! Each certificate records its sample counts, grids, and RNG seed, and
//! carries `grade: "sampled-evidence"` when serialized.

mod convexity;
mod detect;
mod dominance;
mod escape;
mod jump;
mod shallow;
mod tracking;

pub use convexity::{estimate_one_point_convexity, ConvexityCertificate, MinRatioPoint};
pub use detect::{detect_jumps, DetectConfig, JumpEvent};
pub use dominance::{
    check_dominance, equilibrium_averaged, equilibrium_branch, DominanceCertificate, DominanceMode,
    EquilibriumBranch,
};
pub use escape::{escape_certificate, sequential_jump_report, EscapeCertificate, SequentialJumpReport};
pub use jump::{jump_certificate, jump_certificate_averaged, JumpCertificate, PerturbationProbeConfig};
pub use shallow::{shallowness_check, RaProbeConfig, ShallownessReport};
pub use tracking::{tracking_certificate, TrackingCertificate};

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TvError};
use crate::geometry::newton_retract;
use crate::problem::ProblemDefinition;

/// Marker stored in every serialized certificate: these are sampled checks
/// of analytical conditions, not rigorous verification.
pub const EVIDENCE_GRADE: &str = "sampled-evidence";

/// Feasibility tolerance used when certificates retract samples onto the
/// constraint set.
pub(crate) const CERT_FEAS_TOL: f64 = 1e-10;

/// A region of offsets `e` (relative to a reference trajectory) over which a
/// dominance condition is checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum RegionShape {
    /// Axis-aligned box `lower[i] <= e[i] <= upper[i]`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Euclidean ball `|e - center| <= radius`.
    Ball { center: Vec<f64>, radius: f64 },
}

impl RegionShape {
    pub fn dim(&self) -> usize {
        match self {
            RegionShape::Box { lower, .. } => lower.len(),
            RegionShape::Ball { center, .. } => center.len(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            RegionShape::Box { lower, upper } => {
                if lower.len() != n || upper.len() != n {
                    return Err(TvError::InvalidParameter {
                        name: "region".into(),
                        reason: format!("box bounds must have dimension {n}"),
                    });
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
                    return Err(TvError::InvalidParameter {
                        name: "region".into(),
                        reason: "box needs finite lower < upper in every coordinate".into(),
                    });
                }
            }
            RegionShape::Ball { center, radius } => {
                if center.len() != n {
                    return Err(TvError::InvalidParameter {
                        name: "region".into(),
                        reason: format!("ball center must have dimension {n}"),
                    });
                }
                if !(radius.is_finite() && *radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
                    return Err(TvError::InvalidParameter {
                        name: "region".into(),
                        reason: "ball needs finite center and radius > 0".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, e: &DVector<f64>) -> bool {
        self.contains_with_slack(e, 0.0)
    }

    /// Membership with the boundary inflated outward by `slack`.
    pub fn contains_with_slack(&self, e: &DVector<f64>, slack: f64) -> bool {
        match self {
            RegionShape::Box { lower, upper } => e
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (l, u))| *v >= l - slack && *v <= u + slack),
            RegionShape::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                (e - c).norm() <= radius + slack
            }
        }
    }

    /// Geometric center (box midpoint or ball center).
    pub fn center(&self) -> DVector<f64> {
        match self {
            RegionShape::Box { lower, upper } => {
                DVector::from_iterator(lower.len(), lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)))
            }
            RegionShape::Ball { center, .. } => DVector::from_column_slice(center),
        }
    }

    /// A length scale of the region (half-diagonal or radius), used to set
    /// tolerances.
    pub fn scale(&self) -> f64 {
        match self {
            RegionShape::Box { lower, upper } => {
                0.5 * lower.iter().zip(upper).map(|(l, u)| (u - l) * (u - l)).sum::<f64>().sqrt()
            }
            RegionShape::Ball { radius, .. } => *radius,
        }
    }

    /// Uniform sample from the region's interior.
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        match self {
            RegionShape::Box { lower, upper } => DVector::from_iterator(
                lower.len(),
                lower.iter().zip(upper).map(|(l, u)| rng.random_range(*l..*u)),
            ),
            RegionShape::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                c + sample_ball(rng, center.len(), *radius)
            }
        }
    }

    /// Whether the ball `|e - center| <= radius` lies inside the region
    /// (exact for both shapes).
    pub fn contains_ball(&self, center: &DVector<f64>, radius: f64) -> bool {
        match self {
            RegionShape::Box { lower, upper } => center
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(c, (l, u))| *c - radius >= *l && *c + radius <= *u),
            RegionShape::Ball { center: rc, radius: rr } => {
                let c = DVector::from_column_slice(rc);
                (center - c).norm() + radius <= *rr
            }
        }
    }

    /// Outward unit normals of the faces active (within `tol`) at a boundary
    /// point; empty when the point is interior.
    pub(crate) fn active_outward_normals(&self, e: &DVector<f64>, tol: f64) -> Vec<DVector<f64>> {
        let n = self.dim();
        let mut normals = Vec::new();
        match self {
            RegionShape::Box { lower, upper } => {
                for i in 0..n {
                    if (e[i] - lower[i]).abs() <= tol {
                        let mut v = DVector::zeros(n);
                        v[i] = -1.0;
                        normals.push(v);
                    }
                    if (e[i] - upper[i]).abs() <= tol {
                        let mut v = DVector::zeros(n);
                        v[i] = 1.0;
                        normals.push(v);
                    }
                }
            }
            RegionShape::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                let d = e - c;
                if (d.norm() - radius).abs() <= tol && d.norm() > 0.0 {
                    normals.push(&d / d.norm());
                }
            }
        }
        normals
    }
}

/// Region specification for a dominance check: the offset region `D`
/// together with the target radius `r2` it is meant to funnel into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceRegion {
    pub shape: RegionShape,
    /// Target-ball radius around the dominant trajectory.
    pub r2: f64,
}

impl DominanceRegion {
    pub fn new(shape: RegionShape, r2: f64) -> Self {
        Self { shape, r2 }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.shape.validate(n)?;
        if !(self.r2.is_finite() && self.r2 > 0.0) {
            return Err(TvError::InvalidParameter {
                name: "r2".into(),
                reason: format!("target radius must be finite and positive, got {}", self.r2),
            });
        }
        Ok(())
    }
}

/// One standard-normal draw (Box-Muller on two uniform draws).
pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform draw from the unit sphere in `R^n`.
pub(crate) fn sample_unit_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| standard_normal(rng));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Uniform draw from the ball of radius `r` in `R^n`.
pub(crate) fn sample_ball(rng: &mut impl Rng, n: usize, r: f64) -> DVector<f64> {
    let dir = sample_unit_vector(rng, n);
    let u: f64 = rng.random_range(0.0..1.0_f64);
    dir * (r * u.powf(1.0 / n as f64))
}

/// Result of one attempt to draw a feasible offset sample.
pub(crate) enum OffsetSample {
    Feasible(DVector<f64>),
    RetractionFailed,
    Rejected,
}

/// Draws an offset `e` with `base + e` on the constraint set at time `t`,
/// starting from the raw offset `e_raw` and Newton-retracting when
/// constraints are present. `keep` decides whether the retracted offset is
/// acceptable (e.g. still inside a ball or region).
pub(crate) fn retract_offset(
    p: &ProblemDefinition,
    base: &DVector<f64>,
    t: f64,
    e_raw: &DVector<f64>,
    keep: impl Fn(&DVector<f64>) -> bool,
) -> Result<OffsetSample> {
    if p.m() == 0 {
        return Ok(if keep(e_raw) { OffsetSample::Feasible(e_raw.clone()) } else { OffsetSample::Rejected });
    }
    match newton_retract(p, &(base + e_raw), t, CERT_FEAS_TOL, 25) {
        Ok(x) => {
            let e = x - base;
            Ok(if keep(&e) { OffsetSample::Feasible(e) } else { OffsetSample::Rejected })
        }
        Err(TvError::RetractionFailure { .. }) | Err(TvError::RankDeficient { .. }) => {
            Ok(OffsetSample::RetractionFailed)
        }
        Err(e) => Err(e),
    }
}

/// Draws an on-manifold offset whose norm is close to `rho` by rescaling a
/// tangent step until its retraction reaches the target length. A plain
/// retraction pulls tangent steps toward the interior on curved constraint
/// sets, which would leave the outer shell of a sampling ball unvisited.
/// Falls back to the last feasible iterate when the rescaling does not
/// settle; the caller's `keep` still filters the final offset.
pub(crate) fn tangent_radius_sample(
    p: &ProblemDefinition,
    base: &DVector<f64>,
    t: f64,
    dir: &DVector<f64>,
    rho: f64,
    keep: impl Fn(&DVector<f64>) -> bool,
) -> Result<OffsetSample> {
    let mut sigma = rho;
    let mut last: Option<DVector<f64>> = None;
    for _ in 0..8 {
        let raw = dir * sigma;
        let e = match retract_offset(p, base, t, &raw, |_| true)? {
            OffsetSample::Feasible(e) => e,
            other => return Ok(other),
        };
        let norm = e.norm();
        if norm <= 1e-12 * rho {
            break;
        }
        let done = (norm - rho).abs() <= 5e-3 * rho;
        last = Some(e);
        if done {
            break;
        }
        sigma *= rho / norm;
        if !sigma.is_finite() || sigma > 1e3 * rho {
            return Ok(OffsetSample::RetractionFailed);
        }
    }
    Ok(match last {
        Some(e) if keep(&e) => OffsetSample::Feasible(e),
        Some(_) => OffsetSample::Rejected,
        None => OffsetSample::RetractionFailed,
    })
}

/// Trapezoid rule on a (not necessarily uniform) grid.
pub(crate) fn trapezoid(ts: &[f64], vs: &[f64]) -> f64 {
    ts.windows(2)
        .zip(vs.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Cumulative trapezoid integral, same length as the grid, starting at 0.
pub(crate) fn cumulative_trapezoid(ts: &[f64], vs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ts.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..ts.len() {
        acc += 0.5 * (ts[i] - ts[i - 1]) * (vs[i] + vs[i - 1]);
        out.push(acc);
    }
    out
}

/// Fits the smallest-square-error affine majorant `b <= d1 * a + d2` with
/// `d1, d2 >= 0`: unconstrained least squares, negative coefficients clamped
/// to zero and the other re-fit, then the offset lifted so the bound holds at
/// every sample.
pub(crate) fn fit_affine_majorant(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return (0.0, 0.0);
    }
    let n = a.len() as f64;
    let sa: f64 = a.iter().sum();
    let saa: f64 = a.iter().map(|v| v * v).sum();
    let sb: f64 = b.iter().sum();
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let det = n * saa - sa * sa;
    let (mut d1, mut d2) = if det.abs() > 1e-12 * (1.0 + n * saa) {
        ((n * sab - sa * sb) / det, (saa * sb - sa * sab) / det)
    } else {
        (0.0, sb / n)
    };
    if d1 < 0.0 {
        d1 = 0.0;
        d2 = sb / n;
    }
    if d2 < 0.0 {
        d2 = 0.0;
        d1 = if saa > 0.0 { (sab / saa).max(0.0) } else { 0.0 };
    }
    let lift = a.iter().zip(b).map(|(x, y)| y - d1 * x - d2).fold(0.0_f64, f64::max);
    (d1, d2 + lift.max(0.0))
}

/// Linear-drift envelope of a nonnegative rate: the smallest `(eta1, eta2)`
/// of the family used here (mean rate plus worst cumulative deviation) with
/// `integral of rate over [t0, t] <= eta1 (t - t0) + eta2` on the grid.
pub(crate) fn drift_envelope(ts: &[f64], rate: &[f64]) -> (f64, f64) {
    let cum = cumulative_trapezoid(ts, rate);
    let span = ts.last().unwrap() - ts[0];
    if span <= 0.0 {
        return (0.0, 0.0);
    }
    let eta1 = cum.last().unwrap() / span;
    let eta2 = ts
        .iter()
        .zip(&cum)
        .map(|(t, c)| c - eta1 * (t - ts[0]))
        .fold(0.0_f64, f64::max)
        .max(0.0);
    (eta1, eta2)
}

/// Uniform time grid with `nodes` points (at least 2) covering `[t0, t1]`.
pub(crate) fn uniform_time_grid(t0: f64, t1: f64, nodes: usize) -> Vec<f64> {
    let nodes = nodes.max(2);
    (0..nodes).map(|i| t0 + (t1 - t0) * i as f64 / (nodes - 1) as f64).collect()
}

fn validate_time_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() || t_grid.iter().any(|t| !t.is_finite()) {
        return Err(TvError::InvalidParameter {
            name: "t_grid".into(),
            reason: "need a nonempty grid of finite times".into(),
        });
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TvError::InvalidParameter {
            name: "t_grid".into(),
            reason: "grid times must be strictly increasing".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ball_samples_stay_inside_and_fill_the_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut max_norm: f64 = 0.0;
        for _ in 0..2000 {
            let v = sample_ball(&mut rng, 3, 0.7);
            assert!(v.norm() <= 0.7 + 1e-12);
            max_norm = max_norm.max(v.norm());
        }
        assert!(max_norm > 0.65, "ball sampling should reach near the boundary, got {max_norm}");
    }

    #[test]
    fn affine_majorant_clamps_and_covers() {
        // b = 2a + 1 plus noise: fit must stay nonnegative and majorize.
        let a: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| 2.0 * x + 1.0 + 0.01 * ((i * 37 % 11) as f64 - 5.0)).collect();
        let (d1, d2) = fit_affine_majorant(&a, &b);
        assert!(d1 >= 0.0 && d2 >= 0.0);
        for (x, y) in a.iter().zip(&b) {
            assert!(d1 * x + d2 >= y - 1e-12);
        }
        assert_abs_diff_eq!(d1, 2.0, epsilon = 0.2);
    }

    #[test]
    fn drift_envelope_bounds_the_cumulative_integral() {
        let ts: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let rate: Vec<f64> = ts.iter().map(|t| 1.0 + (3.0 * t).sin().abs()).collect();
        let (eta1, eta2) = drift_envelope(&ts, &rate);
        let cum = cumulative_trapezoid(&ts, &rate);
        for (t, c) in ts.iter().zip(&cum) {
            assert!(eta1 * (t - ts[0]) + eta2 >= c - 1e-12);
        }
        assert!(eta2 >= 0.0);
    }

    #[test]
    fn box_region_normals_and_ball_containment() {
        let shape = RegionShape::Box { lower: vec![-1.0, 0.0], upper: vec![1.0, 2.0] };
        let corner = DVector::from_vec(vec![1.0, 0.0]);
        let normals = shape.active_outward_normals(&corner, 1e-9);
        assert_eq!(normals.len(), 2);
        assert!(shape.contains_ball(&DVector::from_vec(vec![0.0, 1.0]), 0.9));
        assert!(!shape.contains_ball(&DVector::from_vec(vec![0.5, 1.0]), 0.6));
    }
}
