//! Shallowness check: whether a minimizer branch moves fast enough, relative
//! to the landscape force inside its region of attraction, that the flow
//! must fall behind and leave that region during the probed window.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{sample_unit_vector, uniform_time_grid, EVIDENCE_GRADE};
use crate::error::{Result, TvError};
use crate::flow::{frozen_flow_classify, Classification, FrozenFlowConfig};
use crate::geometry::{evaluate_geometry, newton_retract, pode_rhs, tangent_basis};
use crate::problem::{MinTrajectory, ProblemDefinition};

/// How the region of attraction around the branch is probed.
#[derive(Debug, Clone, Serialize)]
pub struct RaProbeConfig {
    /// Bisection steps per direction for the radius estimate.
    pub bisection_steps: usize,
    /// Largest radius probed; directions still inside here are reported as
    /// capped.
    pub max_radius: f64,
    /// Time nodes over the probed window.
    pub n_time_nodes: usize,
    pub seed: u64,
    /// Classifier for membership in the branch's basin.
    pub frozen: FrozenFlowConfig,
}

impl Default for RaProbeConfig {
    fn default() -> Self {
        Self {
            bisection_steps: 12,
            max_radius: 4.0,
            n_time_nodes: 9,
            seed: 0x51a,
            frozen: FrozenFlowConfig::default(),
        }
    }
}

/// Outcome of a shallowness check over `[t0, t0 + delta]`.
#[derive(Debug, Clone, Serialize)]
pub struct ShallownessReport {
    pub h1_label: String,
    pub alpha: f64,
    pub t0: f64,
    pub delta: f64,
    /// `sup |h1dot|` over the window (grid maximum).
    pub epsilon: f64,
    /// Finite-difference Lipschitz estimate of `h1dot`.
    pub lip_hdot: f64,
    /// Largest basin radius found over all probed times and directions.
    pub ra_radius: f64,
    /// Smallest directional radius found.
    pub ra_radius_min: f64,
    /// Whether some direction was still inside the basin at `max_radius`.
    pub ra_capped: bool,
    /// `sup` over basin samples of the scaled stationarity residual
    /// `|(1/alpha) P grad_f + Q gprime|`.
    pub e_alpha: f64,
    /// Verdict: the branch outruns the landscape force and its basin is thin
    /// enough that the flow must exit during the window.
    pub shallow: bool,
    /// True when no directional probe classified into the branch's basin;
    /// the radius and force estimates are then meaningless.
    pub unreliable: bool,
    pub n_directions: usize,
    pub bisection_steps: usize,
    pub n_time_nodes: usize,
    pub n_inside_samples: usize,
    pub seed: u64,
    pub grade: &'static str,
}

/// Probes the region of attraction of `h1` over `[t0, t0 + delta]` and
/// evaluates the shallowness inequality: with `epsilon = sup |h1dot|`,
/// `E = sup` of the scaled force over basin samples, and `L` the Lipschitz
/// estimate of `h1dot`, the window is shallow when `epsilon > E + L delta`
/// and the basin radius is at most `delta (epsilon - E - L delta) / 2`.
pub fn shallowness_check(
    p: &ProblemDefinition,
    h1: &MinTrajectory,
    alpha: f64,
    t0: f64,
    delta: f64,
    cfg: &RaProbeConfig,
) -> Result<ShallownessReport> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(TvError::InvalidParameter {
            name: "alpha".into(),
            reason: format!("inertia must be finite and positive, got {alpha}"),
        });
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(TvError::InvalidParameter {
            name: "delta".into(),
            reason: format!("window length must be finite and positive, got {delta}"),
        });
    }
    if !(cfg.max_radius > 0.0) || cfg.bisection_steps == 0 || cfg.n_time_nodes == 0 {
        return Err(TvError::InvalidParameter {
            name: "ra_probe_cfg".into(),
            reason: "need max_radius > 0, bisection_steps >= 1 and n_time_nodes >= 1".into(),
        });
    }

    // Speed and smoothness of the branch on a fine grid.
    let fine = uniform_time_grid(t0, t0 + delta, 64);
    let hdots: Vec<DVector<f64>> = fine.iter().map(|&t| h1.hdot(t)).collect();
    let epsilon = hdots.iter().map(|v| v.norm()).fold(0.0_f64, f64::max);
    let lip_hdot = fine
        .windows(2)
        .zip(hdots.windows(2))
        .map(|(t, v)| (&v[1] - &v[0]).norm() / (t[1] - t[0]))
        .fold(0.0_f64, f64::max);

    let minima = [h1.clone()];
    let label = h1.label();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = p.n();
    let n_directions = 2 * n;
    let t_nodes = if cfg.n_time_nodes == 1 {
        vec![t0 + 0.5 * delta]
    } else {
        uniform_time_grid(t0, t0 + delta, cfg.n_time_nodes)
    };

    let mut ra_radius = 0.0_f64;
    let mut ra_radius_min = f64::INFINITY;
    let mut ra_capped = false;
    let mut e_alpha = 0.0_f64;
    let mut n_inside = 0usize;

    for &t in &t_nodes {
        let base = h1.h(t);
        // The branch point itself is a basin sample.
        e_alpha = e_alpha.max(pode_rhs(p, &base, t, alpha)?.norm());
        let basis = if p.m() > 0 {
            let geo = evaluate_geometry(p, &base, t, 0.0)?;
            Some(tangent_basis(&geo))
        } else {
            None
        };
        for _ in 0..n_directions {
            let dir = match &basis {
                None => sample_unit_vector(&mut rng, n),
                Some(b) => {
                    let v = b * sample_unit_vector(&mut rng, n - p.m());
                    &v / v.norm()
                }
            };
            // inside(s): the probe point classifies into the branch's basin.
            // Inside probes also feed the force supremum.
            let mut inside = |s: f64| -> Result<bool> {
                let raw = &base + &dir * s;
                let x = if p.m() > 0 {
                    match newton_retract(p, &raw, t, super::CERT_FEAS_TOL, 25) {
                        Ok(x) => x,
                        Err(TvError::RetractionFailure { .. }) | Err(TvError::RankDeficient { .. }) => {
                            return Ok(false)
                        }
                        Err(e) => return Err(e),
                    }
                } else {
                    raw
                };
                let is_in = frozen_flow_classify(p, t, &x, &minima, &cfg.frozen)?
                    == Classification::Label(label.to_string());
                if is_in {
                    n_inside += 1;
                    e_alpha = e_alpha.max(pode_rhs(p, &x, t, alpha)?.norm());
                }
                Ok(is_in)
            };

            let r_dir = if inside(cfg.max_radius)? {
                ra_capped = true;
                cfg.max_radius
            } else {
                let mut lo = 0.0_f64;
                let mut hi = cfg.max_radius;
                for _ in 0..cfg.bisection_steps {
                    let mid = 0.5 * (lo + hi);
                    if inside(mid)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            };
            ra_radius = ra_radius.max(r_dir);
            ra_radius_min = ra_radius_min.min(r_dir);
        }
    }

    let unreliable = n_inside == 0;
    let margin = epsilon - e_alpha - lip_hdot * delta;
    let shallow = !unreliable && margin > 0.0 && ra_radius <= 0.5 * delta * margin;

    Ok(ShallownessReport {
        h1_label: label.to_string(),
        alpha,
        t0,
        delta,
        epsilon,
        lip_hdot,
        ra_radius,
        ra_radius_min: if ra_radius_min.is_finite() { ra_radius_min } else { 0.0 },
        ra_capped,
        e_alpha,
        shallow,
        unreliable,
        n_directions,
        bisection_steps: cfg.bisection_steps,
        n_time_nodes: t_nodes.len(),
        n_inside_samples: n_inside,
        seed: cfg.seed,
        grade: EVIDENCE_GRADE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin_quartic, ProblemDefinition};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn a_motionless_branch_is_never_shallow() {
        let p = builtin_quartic(0.0);
        let h1 = MinTrajectory::analytic("local-1", 1, |_t| DVector::from_vec(vec![1.0]), |_t| DVector::zeros(1));
        let rep = shallowness_check(&p, &h1, 0.1, 0.0, 0.5, &RaProbeConfig::default()).unwrap();
        assert!(!rep.shallow);
        assert_eq!(rep.epsilon, 0.0);
        assert!(!rep.unreliable);
        // One side of this well ends at the hilltop between the wells,
        // distance 2 away; the other keeps descending into the well forever.
        assert!(rep.ra_capped);
        assert!((rep.ra_radius_min - 2.0).abs() < 0.01, "min radius {}", rep.ra_radius_min);
    }

    #[test]
    fn a_deep_slow_well_is_not_shallow() {
        let p = ProblemDefinition::unconstrained(
            1,
            |x: &DVector<f64>, t: f64| 0.5 * (x[0] - 0.01 * t.sin()).powi(2),
            |x, t| DVector::from_vec(vec![x[0] - 0.01 * t.sin()]),
        )
        .build()
        .unwrap();
        let h1 = MinTrajectory::analytic(
            "well",
            1,
            |t: f64| DVector::from_vec(vec![0.01 * t.sin()]),
            |t: f64| DVector::from_vec(vec![0.01 * t.cos()]),
        );
        let rep = shallowness_check(&p, &h1, 0.2, 0.0, 1.0, &RaProbeConfig::default()).unwrap();
        assert!(!rep.shallow);
        assert!(rep.ra_capped, "a global well is attracting everywhere probed");
        assert!(rep.epsilon <= 0.01 + 1e-12);
        assert!(rep.e_alpha > rep.epsilon, "force {} should dwarf speed {}", rep.e_alpha, rep.epsilon);
    }

    #[test]
    fn fast_frame_report_near_the_turning_point_is_well_formed() {
        let p = builtin_quartic(10.0);
        let h1 = MinTrajectory::analytic(
            "local-1",
            1,
            |t: f64| DVector::from_vec(vec![1.0 + 10.0 * t.sin()]),
            |t: f64| DVector::from_vec(vec![10.0 * t.cos()]),
        );
        let rep = shallowness_check(&p, &h1, 0.1, FRAC_PI_2 + 0.3, 0.6, &RaProbeConfig::default()).unwrap();
        assert!(!rep.unreliable);
        assert!(rep.epsilon > 0.0 && rep.lip_hdot > 0.0 && rep.e_alpha > 0.0);
        assert!(rep.ra_radius >= rep.ra_radius_min);
    }

    #[test]
    fn probing_a_hilltop_marks_the_report_unreliable() {
        let p = builtin_quartic(0.0);
        let h1 = MinTrajectory::analytic("ridge", 1, |_t| DVector::from_vec(vec![-1.0]), |_t| DVector::zeros(1));
        let rep = shallowness_check(&p, &h1, 0.1, 0.0, 0.5, &RaProbeConfig::default()).unwrap();
        assert!(rep.unreliable);
        assert!(!rep.shallow);
        assert_eq!(rep.n_inside_samples, 0);
    }
}
