//! Jump certificates: given a dominance certificate, how long the window
//! `[t1, t2]` must be for every tested start offset to be funneled into the
//! `r2`-ball of the dominant branch, in uniform and averaged form.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::dominance::average_offset_field;
use super::{
    fit_affine_majorant, retract_offset, trapezoid, uniform_time_grid, DominanceCertificate,
    DominanceMode, OffsetSample, EVIDENCE_GRADE,
};
use crate::error::{Result, TvError};
use crate::geometry::error_field_u;
use crate::problem::{MinTrajectory, ProblemDefinition};

/// Sampling plan for the perturbation bounds of the averaged jump
/// certificate.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationProbeConfig {
    /// Offset samples drawn for the fit (shared across time nodes).
    pub n_samples: usize,
    /// Quadrature / fit nodes on `[t1, t2]` (at least 64 are used).
    pub quad_nodes: usize,
    pub seed: u64,
}

impl Default for PerturbationProbeConfig {
    fn default() -> Self {
        Self { n_samples: 500, quad_nodes: 64, seed: 0x7a21 }
    }
}

/// Evidence that the offset dynamics moves every tested start into the
/// `(r2 - rho)`-ball of the equilibrium branch within the window.
#[derive(Debug, Clone, Serialize)]
pub struct JumpCertificate {
    pub dominance: DominanceCertificate,
    pub mode: DominanceMode,
    /// Worst `|e1 - ebar(t1)|` over the tested start offsets.
    pub worst_start_distance: f64,
    pub n_starts: usize,
    /// Fraction of the window spent closing the equilibrium gap
    /// (uniform mode only).
    pub theta: Option<f64>,
    /// Effective contraction rate after the averaging penalty
    /// (averaged mode only).
    pub beta1: Option<f64>,
    /// Transient amplification from the averaging penalty (averaged mode).
    pub beta2: Option<f64>,
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub sup_delta2: Option<f64>,
    /// Decay-weighted integral of the fitted offset-independent perturbation
    /// over the window (averaged mode).
    pub perturbation_integral: Option<f64>,
    /// Left side of the averaged arrival condition at `t2`.
    pub condition_lhs: Option<f64>,
    /// `r2 - rho`.
    pub condition_rhs: f64,
    /// Smallest window length that satisfies the arrival condition
    /// (infinite when no window does).
    pub required_interval: f64,
    pub actual_interval: f64,
    pub n_fit_samples: Option<usize>,
    pub fit_seed: Option<u64>,
    pub invalid_reason: Option<String>,
    pub valid: bool,
    pub grade: &'static str,
}

fn check_starts(
    dom: &DominanceCertificate,
    e1_set: &[DVector<f64>],
) -> Result<(f64, usize)> {
    if e1_set.is_empty() {
        return Err(TvError::InvalidParameter {
            name: "e1_set".into(),
            reason: "need at least one start offset".into(),
        });
    }
    let n = dom.ebar_t1.len();
    let ebar1 = DVector::from_column_slice(&dom.ebar_t1);
    let mut worst = 0.0_f64;
    for e1 in e1_set {
        if e1.len() != n {
            return Err(TvError::InvalidParameter {
                name: "e1_set".into(),
                reason: format!("start offset dimension {} does not match {}", e1.len(), n),
            });
        }
        if !dom.region.shape.contains(e1) {
            return Err(TvError::CertificateRefused {
                reason: format!(
                    "start offset {:?} lies outside the dominance region",
                    e1.iter().copied().collect::<Vec<f64>>()
                ),
            });
        }
        worst = worst.max((e1 - &ebar1).norm());
    }
    Ok((worst, e1_set.len()))
}

/// Uniform-mode jump certificate: the window must cover both the time to
/// shrink the equilibrium gap (a `theta` fraction of the contraction budget)
/// and the time to contract the worst start into the `(r2 - rho)`-ball.
pub fn jump_certificate(
    dom: &DominanceCertificate,
    e1_set: &[DVector<f64>],
    theta: f64,
) -> Result<JumpCertificate> {
    if dom.mode != DominanceMode::Uniform {
        return Err(TvError::CertificateRefused {
            reason: "uniform jump certificate needs a uniform-mode dominance certificate".into(),
        });
    }
    if !dom.valid {
        return Err(TvError::CertificateRefused {
            reason: "dominance certificate is invalid".into(),
        });
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(TvError::InvalidParameter {
            name: "theta".into(),
            reason: format!("split fraction must lie strictly inside (0, 1), got {theta}"),
        });
    }
    let (worst, n_starts) = check_starts(dom, e1_set)?;
    let (alpha, w, rho, r2) = (dom.alpha, dom.w_hat, dom.rho, dom.region.r2);
    let gap = r2 - rho;
    let term1 = if rho > 0.0 { alpha * rho / (gap * theta * w) } else { 0.0 };
    let term2 = if worst <= gap { 0.0 } else { alpha * (worst / gap).ln() / ((1.0 - theta) * w) };
    let required = term1.max(term2);
    let actual = dom.t2 - dom.t1;
    Ok(JumpCertificate {
        dominance: dom.clone(),
        mode: DominanceMode::Uniform,
        worst_start_distance: worst,
        n_starts,
        theta: Some(theta),
        beta1: None,
        beta2: None,
        eta1: None,
        eta2: None,
        sup_delta2: None,
        perturbation_integral: None,
        condition_lhs: None,
        condition_rhs: gap,
        required_interval: required,
        actual_interval: actual,
        n_fit_samples: None,
        fit_seed: None,
        invalid_reason: if actual >= required { None } else { Some("window shorter than required".into()) },
        valid: actual >= required,
        grade: EVIDENCE_GRADE,
    })
}

/// Averaged-mode jump certificate. The deviation of the instantaneous field
/// from its window average is sampled and fit as
/// `|U - U_av| / alpha <= delta1(t) |e - ebar| + delta2(t)`; the fitted
/// `delta1` yields the drift envelope `(eta1, eta2)`, and arrival holds when
/// `beta2 |e1 - ebar| exp(-beta1 dt) + beta2 * integral <= r2 - rho` with
/// `beta1 = w/alpha - eta1` and `beta2 = exp(eta2)`.
pub fn jump_certificate_averaged(
    p: &ProblemDefinition,
    h2: &MinTrajectory,
    dom: &DominanceCertificate,
    e1_set: &[DVector<f64>],
    cfg: &PerturbationProbeConfig,
) -> Result<JumpCertificate> {
    if dom.mode != DominanceMode::Averaged {
        return Err(TvError::CertificateRefused {
            reason: "averaged jump certificate needs an averaged-mode dominance certificate".into(),
        });
    }
    if !dom.valid {
        return Err(TvError::CertificateRefused {
            reason: "dominance certificate is invalid".into(),
        });
    }
    if h2.label() != dom.h2_label {
        return Err(TvError::CertificateRefused {
            reason: format!(
                "trajectory `{}` does not match the dominance certificate's `{}`",
                h2.label(),
                dom.h2_label
            ),
        });
    }
    if cfg.n_samples == 0 {
        return Err(TvError::InvalidParameter {
            name: "n_samples".into(),
            reason: "need at least one fit sample".into(),
        });
    }
    let (worst, n_starts) = check_starts(dom, e1_set)?;
    let (alpha, w, rho, r2) = (dom.alpha, dom.w_hat, dom.rho, dom.region.r2);
    let (t1, t2) = (dom.t1, dom.t2);
    let tau = uniform_time_grid(t1, t2, cfg.quad_nodes.max(64));
    let ebar = DVector::from_column_slice(&dom.ebar_t1);

    // Offset pool on the feasible set at t1, shared across time nodes; the
    // window average of the field is precomputed once per offset.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = h2.h(t1);
    let mut pool: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::with_capacity(cfg.n_samples);
    let mut attempts = 0usize;
    let mut failures = 0usize;
    while pool.len() < cfg.n_samples && attempts < 60 * cfg.n_samples {
        attempts += 1;
        let raw = dom.region.shape.sample(&mut rng);
        let e = match retract_offset(p, &base, t1, &raw, |e| dom.region.shape.contains(e))? {
            OffsetSample::Feasible(e) => e,
            OffsetSample::RetractionFailed => {
                failures += 1;
                continue;
            }
            OffsetSample::Rejected => continue,
        };
        let u_av = average_offset_field(p, h2, alpha, &e, &tau)?;
        let dist = (&e - &ebar).norm();
        pool.push((e, u_av, dist));
    }
    if 2 * failures > attempts || pool.is_empty() {
        return Err(TvError::SamplingFailure {
            context: "averaged jump perturbation fit".into(),
            reason: format!("{failures} of {attempts} sample retractions failed"),
        });
    }

    let mut delta1 = Vec::with_capacity(tau.len());
    let mut delta2 = Vec::with_capacity(tau.len());
    for &t in &tau {
        let mut a = Vec::with_capacity(pool.len());
        let mut b = Vec::with_capacity(pool.len());
        for (e, u_av, dist) in &pool {
            let u = error_field_u(p, e, t, alpha, h2)?;
            b.push((u - u_av).norm() / alpha);
            a.push(*dist);
        }
        let (d1, d2) = fit_affine_majorant(&a, &b);
        delta1.push(d1);
        delta2.push(d2);
    }
    let (eta1, eta2) = super::drift_envelope(&tau, &delta1);
    let beta1 = w / alpha - eta1;
    let beta2 = eta2.exp();
    let sup_delta2 = delta2.iter().fold(0.0_f64, |m, &v| m.max(v));
    let gap = r2 - rho;

    if beta1 <= 0.0 {
        return Ok(JumpCertificate {
            dominance: dom.clone(),
            mode: DominanceMode::Averaged,
            worst_start_distance: worst,
            n_starts,
            theta: None,
            beta1: Some(beta1),
            beta2: Some(beta2),
            eta1: Some(eta1),
            eta2: Some(eta2),
            sup_delta2: Some(sup_delta2),
            perturbation_integral: None,
            condition_lhs: None,
            condition_rhs: gap,
            required_interval: f64::INFINITY,
            actual_interval: t2 - t1,
            n_fit_samples: Some(pool.len()),
            fit_seed: Some(cfg.seed),
            invalid_reason: Some("averaging gap too large for this alpha".into()),
            valid: false,
            grade: EVIDENCE_GRADE,
        });
    }

    // Arrival condition at the end of a window of length dt_k, using the
    // measured delta2 profile truncated to that window.
    let lhs_at = |k: usize| -> f64 {
        let tk = tau[k];
        if k == 0 {
            return beta2 * worst;
        }
        let weighted: Vec<f64> =
            (0..=k).map(|i| delta2[i] * (-beta1 * (tk - tau[i])).exp()).collect();
        let integral = trapezoid(&tau[..=k], &weighted);
        beta2 * worst * (-beta1 * (tk - t1)).exp() + beta2 * integral
    };
    let lhs_end = lhs_at(tau.len() - 1);
    let perturbation_integral = {
        let weighted: Vec<f64> =
            tau.iter().zip(&delta2).map(|(&ti, &d)| d * (-beta1 * (t2 - ti)).exp()).collect();
        trapezoid(&tau, &weighted)
    };
    let required = (0..tau.len())
        .find(|&k| lhs_at(k) <= gap)
        .map(|k| tau[k] - t1)
        .unwrap_or(f64::INFINITY);
    let valid = lhs_end <= gap;

    Ok(JumpCertificate {
        dominance: dom.clone(),
        mode: DominanceMode::Averaged,
        worst_start_distance: worst,
        n_starts,
        theta: None,
        beta1: Some(beta1),
        beta2: Some(beta2),
        eta1: Some(eta1),
        eta2: Some(eta2),
        sup_delta2: Some(sup_delta2),
        perturbation_integral: Some(perturbation_integral),
        condition_lhs: Some(lhs_end),
        condition_rhs: gap,
        required_interval: required,
        actual_interval: t2 - t1,
        n_fit_samples: Some(pool.len()),
        fit_seed: Some(cfg.seed),
        invalid_reason: if valid { None } else { Some("arrival condition fails over this window".into()) },
        valid,
        grade: EVIDENCE_GRADE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{check_dominance, DominanceRegion, RegionShape};
    use crate::problem::{builtin_quartic, builtin_tracking_quadratic};
    use std::f64::consts::PI;

    fn quadratic_setup(alpha: f64, t1: f64, t2: f64, mode: DominanceMode) -> DominanceCertificate {
        let p = builtin_tracking_quadratic(1.0).unwrap();
        let h2 = MinTrajectory::analytic(
            "center",
            1,
            |t: f64| DVector::from_vec(vec![t.sin()]),
            |t: f64| DVector::from_vec(vec![t.cos()]),
        );
        let h1 = MinTrajectory::analytic(
            "other",
            1,
            |t: f64| DVector::from_vec(vec![t.sin() + 0.2]),
            |t: f64| DVector::from_vec(vec![t.cos()]),
        );
        let region = DominanceRegion::new(RegionShape::Ball { center: vec![0.0], radius: 0.6 }, 0.4);
        check_dominance(&p, &h1, &h2, alpha, t1, t2, &region, 0.05, 150, 4, mode).unwrap()
    }

    #[test]
    fn already_arrived_start_needs_no_window() {
        let p = builtin_quartic(0.0);
        let h2 =
            MinTrajectory::analytic("global", 1, |_t| DVector::from_vec(vec![-2.0]), |_t| DVector::zeros(1));
        let h1 =
            MinTrajectory::analytic("seed", 1, |_t| DVector::from_vec(vec![-2.1]), |_t| DVector::zeros(1));
        let region = DominanceRegion::new(RegionShape::Ball { center: vec![0.0], radius: 0.4 }, 0.3);
        let dom = check_dominance(&p, &h1, &h2, 0.1, 0.0, 1.0, &region, 0.05, 200, 8, DominanceMode::Uniform)
            .unwrap();
        // Time-invariant: rho = 0; a start already at the equilibrium gives
        // required_interval = 0.
        let cert = jump_certificate(&dom, &[DVector::zeros(1)], 0.2).unwrap();
        assert_eq!(cert.required_interval, 0.0);
        assert!(cert.valid);
    }

    #[test]
    fn split_fraction_near_one_blows_up_the_required_window() {
        let dom = quadratic_setup(0.1, 0.0, PI / 2.0, DominanceMode::Uniform);
        let start = DVector::from_vec(vec![0.55]);
        let tight = jump_certificate(&dom, &[start.clone()], 0.2).unwrap();
        let loose = jump_certificate(&dom, &[start], 0.999_999).unwrap();
        assert!(tight.valid);
        assert!(loose.required_interval > 100.0 * tight.required_interval);
        assert!(!loose.valid);
    }

    #[test]
    fn rejects_invalid_dominance_and_bad_theta() {
        let dom = quadratic_setup(0.1, 0.0, PI / 2.0, DominanceMode::Uniform);
        let start = DVector::from_vec(vec![0.5]);
        assert!(matches!(
            jump_certificate(&dom, &[start.clone()], 1.0).unwrap_err(),
            TvError::InvalidParameter { .. }
        ));
        let mut broken = dom.clone();
        broken.valid = false;
        assert!(matches!(
            jump_certificate(&broken, &[start.clone()], 0.2).unwrap_err(),
            TvError::CertificateRefused { .. }
        ));
        let outside = DVector::from_vec(vec![0.7]);
        assert!(matches!(
            jump_certificate(&dom, &[outside], 0.2).unwrap_err(),
            TvError::CertificateRefused { .. }
        ));
    }

    #[test]
    fn averaged_perturbation_of_the_moving_quadratic_matches_the_closed_form() {
        // U = e + alpha cos t, so p = -(U - U_av)/alpha = -(cos t - avg) and
        // the fit must find delta1 = 0, delta2(t) = |cos t - avg|.
        let p = builtin_tracking_quadratic(1.0).unwrap();
        let h2 = MinTrajectory::analytic(
            "center",
            1,
            |t: f64| DVector::from_vec(vec![t.sin()]),
            |t: f64| DVector::from_vec(vec![t.cos()]),
        );
        let (t1, t2) = (0.0, PI / 2.0);
        let dom = quadratic_setup(0.1, t1, t2, DominanceMode::Averaged);
        let nodes = 64;
        let cert = jump_certificate_averaged(
            &p,
            &h2,
            &dom,
            &[DVector::from_vec(vec![0.3])],
            &PerturbationProbeConfig { n_samples: 120, quad_nodes: nodes, seed: 3 },
        )
        .unwrap();
        let grid: Vec<f64> =
            (0..nodes).map(|i| t1 + (t2 - t1) * i as f64 / (nodes - 1) as f64).collect();
        // Same quadrature as the certificate's window average.
        let cos_vals: Vec<f64> = grid.iter().map(|t| t.cos()).collect();
        let avg = crate::certify::trapezoid(&grid, &cos_vals) / (t2 - t1);
        let d2_expected: Vec<f64> = grid.iter().map(|t| (t.cos() - avg).abs()).collect();
        let sup_expected = d2_expected.iter().fold(0.0_f64, |m, &v| m.max(v));
        assert!(cert.eta1.unwrap() < 1e-9, "delta1 envelope {}", cert.eta1.unwrap());
        assert!(
            (cert.sup_delta2.unwrap() - sup_expected).abs() < 1e-6,
            "sup delta2 {} vs {sup_expected}",
            cert.sup_delta2.unwrap()
        );
        // The decay-weighted perturbation integral should match the same
        // quadrature applied to the closed-form profile.
        let beta1 = cert.beta1.unwrap();
        let weighted: Vec<f64> = grid
            .iter()
            .zip(&d2_expected)
            .map(|(&ti, &d)| d * (-beta1 * (t2 - ti)).exp())
            .collect();
        let reference = crate::certify::trapezoid(&grid, &weighted);
        assert!(
            (cert.perturbation_integral.unwrap() - reference).abs() < 1e-6,
            "integral {} vs {reference}",
            cert.perturbation_integral.unwrap()
        );
        assert!(cert.valid, "lhs {:?} rhs {}", cert.condition_lhs, cert.condition_rhs);
    }

    #[test]
    fn time_invariant_verdicts_agree_between_modes() {
        let p = builtin_quartic(0.0);
        let h2 =
            MinTrajectory::analytic("global", 1, |_t| DVector::from_vec(vec![-2.0]), |_t| DVector::zeros(1));
        let h1 =
            MinTrajectory::analytic("seed", 1, |_t| DVector::from_vec(vec![-2.3]), |_t| DVector::zeros(1));
        let region = DominanceRegion::new(RegionShape::Ball { center: vec![0.0], radius: 0.45 }, 0.35);
        let starts = [DVector::from_vec(vec![-0.4])];
        for (t2, expect) in [(2.0, true), (0.001, false)] {
            let dom_u =
                check_dominance(&p, &h1, &h2, 0.3, 0.0, t2, &region, 0.05, 150, 6, DominanceMode::Uniform)
                    .unwrap();
            let dom_a =
                check_dominance(&p, &h1, &h2, 0.3, 0.0, t2, &region, 0.05, 150, 6, DominanceMode::Averaged)
                    .unwrap();
            let ju = jump_certificate(&dom_u, &starts, 0.2).unwrap();
            let ja = jump_certificate_averaged(
                &p,
                &h2,
                &dom_a,
                &starts,
                &PerturbationProbeConfig { n_samples: 100, quad_nodes: 64, seed: 9 },
            )
            .unwrap();
            assert_eq!(ju.valid, expect, "uniform verdict at window {t2}");
            assert_eq!(ja.valid, expect, "averaged verdict at window {t2}");
            // Time-invariant: no averaging penalty.
            assert!(ja.eta1.unwrap().abs() < 1e-12 && ja.eta2.unwrap().abs() < 1e-12);
        }
    }
}
