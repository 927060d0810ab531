//! Escape certificate: a jump into the target ball chained with tracking
//! inside it, plus a report type for chains of jumps across several
//! branches.

use serde::Serialize;

use super::{JumpCertificate, TrackingCertificate, EVIDENCE_GRADE};
use crate::error::{Result, TvError};

/// Evidence that the flow leaves the neighborhood of one minimizer branch,
/// arrives in the `r2`-ball of another, and then stays there.
#[derive(Debug, Clone, Serialize)]
pub struct EscapeCertificate {
    pub jump: JumpCertificate,
    pub tracking: TrackingCertificate,
    pub valid: bool,
    pub grade: &'static str,
}

/// Combines a jump certificate with a tracking certificate for the same
/// target branch, inertia, and radius. Refuses mismatched inputs; the result
/// is valid exactly when both parts are.
pub fn escape_certificate(
    jump: &JumpCertificate,
    tracking: &TrackingCertificate,
) -> Result<EscapeCertificate> {
    if jump.dominance.h2_label != tracking.h2_label {
        return Err(TvError::CertificateRefused {
            reason: format!(
                "jump targets `{}` but tracking covers `{}`",
                jump.dominance.h2_label, tracking.h2_label
            ),
        });
    }
    if jump.dominance.alpha != tracking.alpha {
        return Err(TvError::CertificateRefused {
            reason: format!(
                "inertia mismatch: jump at alpha = {}, tracking at alpha = {}",
                jump.dominance.alpha, tracking.alpha
            ),
        });
    }
    if jump.dominance.region.r2 != tracking.r2 {
        return Err(TvError::CertificateRefused {
            reason: format!(
                "target radius mismatch: jump lands in r2 = {}, tracking holds r2 = {}",
                jump.dominance.region.r2, tracking.r2
            ),
        });
    }
    Ok(EscapeCertificate {
        jump: jump.clone(),
        tracking: tracking.clone(),
        valid: jump.valid && tracking.valid,
        grade: EVIDENCE_GRADE,
    })
}

/// One hop of a jump chain.
#[derive(Debug, Clone, Serialize)]
pub struct SequentialJumpLink {
    pub from: String,
    pub to: String,
    pub t1: f64,
    pub t2: f64,
    pub valid: bool,
}

/// Composition report for consecutive jump certificates: the chain is sound
/// when every link is valid, each link starts where the previous one landed,
/// and the windows do not overlap.
#[derive(Debug, Clone, Serialize)]
pub struct SequentialJumpReport {
    pub links: Vec<SequentialJumpLink>,
    pub from: String,
    pub to: String,
    pub labels_chain: bool,
    pub windows_ordered: bool,
    pub all_valid: bool,
    pub chain_ok: bool,
    pub grade: &'static str,
}

pub fn sequential_jump_report(certs: &[JumpCertificate]) -> Result<SequentialJumpReport> {
    if certs.is_empty() {
        return Err(TvError::InvalidParameter {
            name: "certs".into(),
            reason: "need at least one jump certificate".into(),
        });
    }
    let links: Vec<SequentialJumpLink> = certs
        .iter()
        .map(|c| SequentialJumpLink {
            from: c.dominance.h1_label.clone(),
            to: c.dominance.h2_label.clone(),
            t1: c.dominance.t1,
            t2: c.dominance.t2,
            valid: c.valid,
        })
        .collect();
    let labels_chain = links.windows(2).all(|w| w[0].to == w[1].from);
    let windows_ordered = links.windows(2).all(|w| w[0].t2 <= w[1].t1 + 1e-12);
    let all_valid = links.iter().all(|l| l.valid);
    Ok(SequentialJumpReport {
        from: links[0].from.clone(),
        to: links[links.len() - 1].to.clone(),
        labels_chain,
        windows_ordered,
        all_valid,
        chain_ok: labels_chain && windows_ordered && all_valid,
        links,
        grade: EVIDENCE_GRADE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{
        check_dominance, estimate_one_point_convexity, jump_certificate, tracking_certificate,
        DominanceMode, DominanceRegion, RegionShape,
    };
    use crate::problem::{builtin_tracking_quadratic, MinTrajectory};
    use nalgebra::DVector;
    use std::f64::consts::PI;

    fn center() -> MinTrajectory {
        MinTrajectory::analytic(
            "center",
            1,
            |t: f64| DVector::from_vec(vec![t.sin()]),
            |t: f64| DVector::from_vec(vec![t.cos()]),
        )
    }

    fn shifted(label: &str, off: f64) -> MinTrajectory {
        MinTrajectory::analytic(
            label.to_string(),
            1,
            move |t: f64| DVector::from_vec(vec![t.sin() + off]),
            |t: f64| DVector::from_vec(vec![t.cos()]),
        )
    }

    #[test]
    fn escape_is_the_conjunction_and_rejects_radius_mismatch() {
        let p = builtin_tracking_quadratic(1.0).unwrap();
        let h2 = center();
        let h1 = shifted("other", 0.2);
        let region = DominanceRegion::new(RegionShape::Ball { center: vec![0.0], radius: 0.6 }, 0.4);
        let dom =
            check_dominance(&p, &h1, &h2, 0.1, 0.0, PI / 2.0, &region, 0.05, 150, 4, DominanceMode::Uniform)
                .unwrap();
        let jump = jump_certificate(&dom, &[DVector::from_vec(vec![0.5])], 0.2).unwrap();
        let grid: Vec<f64> = (0..=64).map(|i| i as f64 * PI / 64.0).collect();
        let conv_match = estimate_one_point_convexity(&p, &h2, 0.4, &grid, 50, 2).unwrap();
        let track = tracking_certificate(&p, &h2, 0.1, &conv_match, &grid, 0, 0).unwrap();
        let esc = escape_certificate(&jump, &track).unwrap();
        assert!(esc.valid);

        // Same label, inertia and radius, but a frame five times faster:
        // tracking fails there, and so must the combined certificate.
        let pf = builtin_tracking_quadratic(5.0).unwrap();
        let h2f = MinTrajectory::analytic(
            "center",
            1,
            |t: f64| DVector::from_vec(vec![(5.0 * t).sin()]),
            |t: f64| DVector::from_vec(vec![5.0 * (5.0 * t).cos()]),
        );
        let conv_fast = estimate_one_point_convexity(&pf, &h2f, 0.4, &grid, 50, 2).unwrap();
        let slow = tracking_certificate(&pf, &h2f, 0.1, &conv_fast, &grid, 0, 0).unwrap();
        assert!(!slow.valid, "alpha_max should be 0.08 here, got {}", slow.alpha_max);
        assert!(!escape_certificate(&jump, &slow).unwrap().valid);

        // A window far shorter than the required approach interval breaks
        // the jump side of the conjunction.
        let dom_short =
            check_dominance(&p, &h1, &h2, 0.1, 0.0, 0.02, &region, 0.05, 150, 4, DominanceMode::Uniform)
                .unwrap();
        let jump_short = jump_certificate(&dom_short, &[DVector::from_vec(vec![0.5])], 0.2).unwrap();
        assert!(!jump_short.valid);
        assert!(!escape_certificate(&jump_short, &track).unwrap().valid);

        let conv_wrong = estimate_one_point_convexity(&p, &h2, 0.3, &grid, 50, 2).unwrap();
        let track_wrong = tracking_certificate(&p, &h2, 0.1, &conv_wrong, &grid, 0, 0).unwrap();
        let err = escape_certificate(&jump, &track_wrong).unwrap_err();
        assert!(matches!(err, TvError::CertificateRefused { .. }), "{err}");
    }

    #[test]
    fn chain_report_checks_labels_and_window_order() {
        let p = builtin_tracking_quadratic(1.0).unwrap();
        let a = shifted("a", 0.2);
        let b = center().with_label("b");
        let c = shifted("c", -0.2);
        let region = DominanceRegion::new(RegionShape::Ball { center: vec![0.0], radius: 0.6 }, 0.4);
        let mk = |h1: &MinTrajectory, h2: &MinTrajectory, t1: f64, t2: f64| {
            let dom =
                check_dominance(&p, h1, h2, 0.1, t1, t2, &region, 0.05, 100, 4, DominanceMode::Uniform)
                    .unwrap();
            jump_certificate(&dom, &[DVector::from_vec(vec![0.3])], 0.2).unwrap()
        };
        let j1 = mk(&a, &b, 0.0, 0.8);
        let j2 = mk(&b, &c, 0.8, 1.6);
        let good = sequential_jump_report(&[j1.clone(), j2.clone()]).unwrap();
        assert!(good.chain_ok && good.labels_chain && good.windows_ordered);
        assert_eq!(good.from, "a");
        assert_eq!(good.to, "c");

        let overlapping = sequential_jump_report(&[j2.clone(), j1.clone()]).unwrap();
        assert!(!overlapping.chain_ok);

        let j_skip = mk(&a, &c, 2.0, 2.8);
        let broken_labels = sequential_jump_report(&[j1, j_skip]).unwrap();
        assert!(!broken_labels.labels_chain && !broken_labels.chain_ok);
    }
}
