//! Tracking certificate: an upper bound on the inertia `alpha` under which
//! the flow provably stays inside the `r2`-ball of a minimizer trajectory,
//! plus an evaluator for the predicted offset-norm envelope.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    drift_envelope, fit_affine_majorant, sample_ball, tangent_radius_sample, validate_time_grid,
    ConvexityCertificate, OffsetSample, EVIDENCE_GRADE,
};
use crate::error::{Result, TvError};
use crate::geometry::{evaluate_geometry, tangent_basis};
use crate::problem::{MinTrajectory, ProblemDefinition};

/// Evidence that the flow with inertia `alpha` keeps `|x(t) - h2(t)| <= r2`
/// when started within `initial_radius` of `h2`, together with the
/// quantities needed to evaluate the predicted error envelope.
#[derive(Debug, Clone, Serialize)]
pub struct TrackingCertificate {
    pub h2_label: String,
    pub alpha: f64,
    /// Convexity modulus inherited from the convexity certificate.
    pub c2: f64,
    /// Ball radius inherited from the convexity certificate.
    pub r2: f64,
    pub gamma_sup: f64,
    pub t_grid: Vec<f64>,
    /// `|h2dot|` on the grid.
    pub gamma: Vec<f64>,
    /// Offset-proportional constraint-drift bound on the grid.
    pub delta1: Vec<f64>,
    /// Offset-independent constraint-drift bound on the grid.
    pub delta2: Vec<f64>,
    pub eta1: f64,
    pub eta2: f64,
    /// Largest inertia for which the certificate's tracking argument closes.
    pub alpha_max: f64,
    /// Start offsets must be within this radius for the envelope to apply.
    pub initial_radius: f64,
    /// Which drift fit produced the certificate: per-node least squares or
    /// the constant majorant (whichever allows the larger inertia), or the
    /// unconstrained specialization.
    pub fit_variant: &'static str,
    /// Contraction rate `c2/alpha - eta1` of the envelope.
    pub decay_rate: f64,
    /// Decay-weighted integral of `delta2 + gamma` up to each grid time.
    pub error_integral: Vec<f64>,
    pub n_samples: usize,
    pub n_retraction_failures: usize,
    pub seed: u64,
    /// True exactly when `alpha <= alpha_max`.
    pub valid: bool,
    pub grade: &'static str,
}

impl TrackingCertificate {
    /// Predicted offset-norm envelope at time `t` for a start offset of norm
    /// `e1_norm` at the grid start. Times are clamped to the grid span; the
    /// envelope only applies when `e1_norm <= initial_radius`.
    pub fn predicted_error(&self, t: f64, e1_norm: f64) -> f64 {
        let t1 = self.t_grid[0];
        let tend = *self.t_grid.last().unwrap();
        let t = t.clamp(t1, tend);
        let amp = self.eta2.exp();
        let decay = (-self.decay_rate * (t - t1)).exp();
        amp * (e1_norm * decay + self.interp_integral(t))
    }

    /// Long-run cap on the predicted envelope: the larger of the amplified
    /// start offset and the steady drift residue.
    pub fn ultimate_bound(&self, e1_norm: f64) -> f64 {
        let beta2 = self.eta2.exp();
        let sup = self
            .delta2
            .iter()
            .zip(&self.gamma)
            .map(|(d, g)| d + g)
            .fold(0.0_f64, f64::max);
        let steady = if self.decay_rate > 0.0 { beta2 * sup / self.decay_rate } else { f64::INFINITY };
        (beta2 * e1_norm).max(steady)
    }

    fn interp_integral(&self, t: f64) -> f64 {
        let ts = &self.t_grid;
        if t <= ts[0] {
            return self.error_integral[0];
        }
        for i in 1..ts.len() {
            if t <= ts[i] {
                let w = (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
                return self.error_integral[i - 1] * (1.0 - w) + self.error_integral[i] * w;
            }
        }
        *self.error_integral.last().unwrap()
    }
}

/// Builds a tracking certificate for `h2` at inertia `alpha` from a valid
/// convexity certificate. The constraint drift felt by the offset is sampled
/// in the `r2`-ball at each grid time and fit as
/// `|Q gprime| <= delta1(t) |e| + delta2(t)`; both that fit and the constant
/// majorant `delta1 = 0` are tried and the one admitting the larger
/// `alpha_max` is kept. Unconstrained problems take `delta1 = delta2 = 0`.
pub fn tracking_certificate(
    p: &ProblemDefinition,
    h2: &MinTrajectory,
    alpha: f64,
    conv: &ConvexityCertificate,
    t_grid: &[f64],
    n_samples: usize,
    rng_seed: u64,
) -> Result<TrackingCertificate> {
    if !conv.valid {
        return Err(TvError::CertificateRefused {
            reason: format!("convexity certificate is invalid (c_hat = {})", conv.c_hat),
        });
    }
    if conv.h_label != h2.label() {
        return Err(TvError::CertificateRefused {
            reason: format!(
                "convexity certificate refers to `{}`, not `{}`",
                conv.h_label,
                h2.label()
            ),
        });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(TvError::InvalidParameter {
            name: "alpha".into(),
            reason: format!("inertia must be finite and positive, got {alpha}"),
        });
    }
    validate_time_grid(t_grid)?;
    if t_grid.len() < 2 {
        return Err(TvError::InvalidParameter {
            name: "t_grid".into(),
            reason: "need at least two grid times".into(),
        });
    }
    let (c2, r2) = (conv.c_hat, conv.r);
    let n = p.n();

    let gamma: Vec<f64> = t_grid.iter().map(|&t| h2.hdot(t).norm()).collect();
    let gamma_sup = gamma.iter().fold(0.0_f64, |m, &v| m.max(v));

    let mut retraction_failures = 0usize;
    let (delta1, delta2, fit_variant) = if p.m() == 0 {
        (vec![0.0; t_grid.len()], vec![0.0; t_grid.len()], "unconstrained")
    } else {
        if n_samples == 0 {
            return Err(TvError::InvalidParameter {
                name: "n_samples".into(),
                reason: "need at least one drift sample per grid time".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut d1_ls = Vec::with_capacity(t_grid.len());
        let mut d2_ls = Vec::with_capacity(t_grid.len());
        let mut d2_const = Vec::with_capacity(t_grid.len());
        let mut attempts = 0usize;
        for &t in t_grid {
            let base = h2.h(t);
            let geo0 = evaluate_geometry(p, &base, t, alpha)?;
            let basis = tangent_basis(&geo0);
            let mut a = Vec::with_capacity(n_samples);
            let mut b = Vec::with_capacity(n_samples);
            // The drift at the reference point itself pins the intercept.
            b.push((&geo0.q * p.gprime(&base, t)).norm());
            a.push(0.0);
            let mut kept = 0usize;
            let mut node_attempts = 0usize;
            while kept < n_samples && node_attempts < 40 * n_samples {
                node_attempts += 1;
                attempts += 1;
                let z = sample_ball(&mut rng, n - p.m(), r2);
                let rho = z.norm();
                if rho < 1e-9 * r2 {
                    continue;
                }
                let dir = &basis * (&z / rho);
                let e = match tangent_radius_sample(p, &base, t, &dir, rho, |e| e.norm() <= r2)? {
                    OffsetSample::Feasible(e) => e,
                    OffsetSample::RetractionFailed => {
                        retraction_failures += 1;
                        continue;
                    }
                    OffsetSample::Rejected => continue,
                };
                let x = &base + &e;
                let geo = evaluate_geometry(p, &x, t, alpha)?;
                let drift = (&geo.q * p.gprime(&x, t)).norm();
                a.push(e.norm());
                b.push(drift);
                kept += 1;
            }
            let (d1, d2) = fit_affine_majorant(&a, &b);
            d1_ls.push(d1);
            d2_ls.push(d2);
            d2_const.push(b.iter().fold(0.0_f64, |m, &v| m.max(v)));
        }
        if 2 * retraction_failures > attempts {
            return Err(TvError::SamplingFailure {
                context: "constraint drift fit".into(),
                reason: format!("{retraction_failures} of {attempts} sample retractions failed"),
            });
        }
        // Keep whichever fit admits the larger inertia bound.
        let zero = vec![0.0; t_grid.len()];
        let am_ls = alpha_bound(c2, r2, t_grid, &d1_ls, &d2_ls, &gamma);
        let am_const = alpha_bound(c2, r2, t_grid, &zero, &d2_const, &gamma);
        if am_ls >= am_const {
            (d1_ls, d2_ls, "least-squares")
        } else {
            (zero, d2_const, "constant-majorant")
        }
    };

    let (eta1, eta2) = drift_envelope(t_grid, &delta1);
    let alpha_max = alpha_bound(c2, r2, t_grid, &delta1, &delta2, &gamma);
    let decay_rate = c2 / alpha - eta1;

    // J(t_i) = integral of exp(-decay (t_i - tau)) (delta2 + gamma) d tau,
    // built by the exact per-interval recurrence with trapezoid endpoints.
    let v: Vec<f64> = delta2.iter().zip(&gamma).map(|(d, g)| d + g).collect();
    let mut error_integral = Vec::with_capacity(t_grid.len());
    error_integral.push(0.0);
    for i in 1..t_grid.len() {
        let dt = t_grid[i] - t_grid[i - 1];
        let damp = (-decay_rate * dt).exp();
        let prev = error_integral[i - 1];
        error_integral.push(prev * damp + 0.5 * dt * (v[i - 1] * damp + v[i]));
    }

    Ok(TrackingCertificate {
        h2_label: h2.label().to_string(),
        alpha,
        c2,
        r2,
        gamma_sup,
        t_grid: t_grid.to_vec(),
        gamma,
        delta1,
        delta2,
        eta1,
        eta2,
        alpha_max,
        initial_radius: r2 / eta2.exp(),
        fit_variant,
        decay_rate,
        error_integral,
        n_samples,
        n_retraction_failures: retraction_failures,
        seed: rng_seed,
        valid: alpha <= alpha_max,
        grade: EVIDENCE_GRADE,
    })
}

/// The admissible-inertia bound for a given drift envelope:
/// `c2 r2 / (e^{eta2} sup(delta2 + gamma) + eta1 r2)`, infinite when the
/// denominator vanishes.
fn alpha_bound(c2: f64, r2: f64, ts: &[f64], d1: &[f64], d2: &[f64], gamma: &[f64]) -> f64 {
    let (eta1, eta2) = drift_envelope(ts, d1);
    let sup = d2.iter().zip(gamma).map(|(d, g)| d + g).fold(0.0_f64, f64::max);
    let denom = eta2.exp() * sup + eta1 * r2;
    if denom > 0.0 {
        c2 * r2 / denom
    } else {
        f64::INFINITY
    }
}
