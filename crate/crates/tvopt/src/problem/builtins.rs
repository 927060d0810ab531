use std::collections::BTreeMap;
use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TvError};

use super::ProblemDefinition;

/// Moving scalar quartic: `f(x, t) = q(x - b sin t)` with
/// `q(y) = y^4/4 + 2 y^3/3 - y^2/2 - 2 y`.
///
/// `q` has stationary points at `y = -2` (local minimum), `y = -1` (local
/// maximum) and `y = 1` (global minimum), so the problem carries one spurious
/// and one global minimum trajectory, both translating with amplitude `b`.
pub fn builtin_quartic(b: f64) -> ProblemDefinition {
    let y = move |x: &DVector<f64>, t: f64| x[0] - b * t.sin();
    // min over R of q is q(1) = -19/12.
    ProblemDefinition::unconstrained(
        1,
        move |x, t| {
            let y = y(x, t);
            0.25 * y.powi(4) + (2.0 / 3.0) * y.powi(3) - 0.5 * y * y - 2.0 * y
        },
        move |x, t| {
            let y = y(x, t);
            DVector::from_vec(vec![(y - 1.0) * (y + 1.0) * (y + 2.0)])
        },
    )
    .hess_f(move |x, t| {
        let y = y(x, t);
        DMatrix::from_element(1, 1, 3.0 * y * y + 4.0 * y - 1.0)
    })
    .lower_bound(-19.0 / 12.0)
    .name("quartic")
    .build()
    .expect("static definition")
}

/// The two stationary-point offsets of the quartic that are minima, in the
/// shifted coordinate `y = x - b sin t`: the spurious one and the global one.
pub const QUARTIC_MIN_OFFSETS: [f64; 2] = [-2.0, 1.0];

fn ackley_base(d: f64, u: &DVector<f64>) -> f64 {
    let s = (0.5 * (u[0] * u[0] + u[1] * u[1]) + d * d).sqrt();
    let c = 0.5 * ((2.0 * PI * u[0]).cos() + (2.0 * PI * u[1]).cos());
    0.5 * E + 20.0 * (-d).exp() - 20.0 * (-s).exp() - 0.5 * c.exp()
}

fn ackley_grad(d: f64, u: &DVector<f64>) -> DVector<f64> {
    let s = (0.5 * (u[0] * u[0] + u[1] * u[1]) + d * d).sqrt();
    let es = (-s).exp();
    let c = 0.5 * ((2.0 * PI * u[0]).cos() + (2.0 * PI * u[1]).cos());
    let ec = c.exp();
    DVector::from_fn(2, |i, _| {
        10.0 * u[i] * es / s + 0.5 * PI * (2.0 * PI * u[i]).sin() * ec
    })
}

fn ackley_hess(d: f64, u: &DVector<f64>) -> DMatrix<f64> {
    let s = (0.5 * (u[0] * u[0] + u[1] * u[1]) + d * d).sqrt();
    let es = (-s).exp();
    let c = 0.5 * ((2.0 * PI * u[0]).cos() + (2.0 * PI * u[1]).cos());
    let ec = c.exp();
    DMatrix::from_fn(2, 2, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        let smooth = 10.0 * es * (delta / s - 0.5 * u[i] * u[j] * (s + 1.0) / (s * s * s));
        let si = (2.0 * PI * u[i]).sin();
        let sj = (2.0 * PI * u[j]).sin();
        let osc = -0.5 * PI * PI * ec * si * sj
            + delta * PI * PI * ec * (2.0 * PI * u[i]).cos();
        smooth + osc
    })
}

/// Position of the moving frame for the constrained Ackley benchmark.
pub fn ackley_frame(t: f64) -> DVector<f64> {
    DVector::from_vec(vec![24.0 * t.sin(), t.cos()])
}

/// Velocity of the moving frame.
pub fn ackley_frame_dot(t: f64) -> DVector<f64> {
    DVector::from_vec(vec![24.0 * t.cos(), -t.sin()])
}

/// Feasible point of the constrained Ackley benchmark with second offset
/// coordinate `e2`; the first is solved from the parabola constraint.
pub fn ackley_point_on_parabola(t: f64, e2: f64) -> DVector<f64> {
    ackley_frame(t) + DVector::from_vec(vec![0.5 * e2 * e2, e2])
}

/// Offset (relative to the frame) of the spurious minimum singled out by the
/// constrained Ackley benchmark. The second coordinate is 1.96; the first is
/// forced by the parabola constraint to 0.5 * 1.96^2 = 1.9208.
pub const ACKLEY_SPURIOUS_OFFSET: [f64; 2] = [0.5 * 1.96 * 1.96, 1.96];

/// Smoothed two-dimensional Ackley landscape rigidly translated along a frame
/// `z(t) = [24 sin t, cos t]`, restricted to a moving parabola:
///
/// `g(x, t) = (x1 - z1) - 0.5 (x2 - z2)^2 = 0`.
///
/// The smoothing parameter `d > 0` replaces the root-norm kink at the origin;
/// the global minimum sits at offset zero from the frame.
pub fn builtin_ackley_constrained(d: f64) -> Result<ProblemDefinition> {
    if d <= 0.0 {
        return Err(TvError::InvalidParameter {
            name: "d".into(),
            reason: format!("smoothing parameter must be positive, got {d}"),
        });
    }
    let off = move |x: &DVector<f64>, t: f64| x - ackley_frame(t);
    ProblemDefinition::constrained(
        2,
        1,
        move |x, t| ackley_base(d, &off(x, t)),
        move |x, t| ackley_grad(d, &off(x, t)),
    )
    .hess_f(move |x, t| ackley_hess(d, &off(x, t)))
    .constraints(
        move |x, t| {
            let u = off(x, t);
            DVector::from_vec(vec![u[0] - 0.5 * u[1] * u[1]])
        },
        move |x, t| {
            let u = off(x, t);
            DMatrix::from_row_slice(1, 2, &[1.0, -u[1]])
        },
        move |x, t| {
            let u = off(x, t);
            let zdot = ackley_frame_dot(t);
            DVector::from_vec(vec![-zdot[0] + u[1] * zdot[1]])
        },
    )
    .jac_g_prime(move |_x, t| {
        let zdot = ackley_frame_dot(t);
        DMatrix::from_row_slice(1, 2, &[0.0, zdot[1]])
    })
    .hess_g(move |_x, _t, _k| DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0]))
    .lower_bound(0.0)
    .name("ackley-constrained")
    .build()
}

/// Scalar tracking benchmark `f(x, t) = 0.5 (x - sin(omega t))^2`, whose
/// unique minimum trajectory is `h(t) = sin(omega t)`.
pub fn builtin_tracking_quadratic(omega: f64) -> Result<ProblemDefinition> {
    if omega <= 0.0 {
        return Err(TvError::InvalidParameter {
            name: "omega".into(),
            reason: format!("frequency must be positive, got {omega}"),
        });
    }
    ProblemDefinition::unconstrained(
        1,
        move |x, t| {
            let e = x[0] - (omega * t).sin();
            0.5 * e * e
        },
        move |x, t| DVector::from_vec(vec![x[0] - (omega * t).sin()]),
    )
    .hess_f(|_x, _t| DMatrix::from_element(1, 1, 1.0))
    .lower_bound(0.0)
    .name("tracking-quadratic")
    .build()
}

/// Looks a builtin problem up by name with a parameter map.
///
/// Names: `"quartic"` (param `b`, default 5), `"ackley-constrained"`
/// (param `d`, default 0.01), `"tracking-quadratic"` (param `omega`,
/// default 1). Unknown names or parameters are errors.
pub fn builtin_by_name(name: &str, params: &BTreeMap<String, f64>) -> Result<ProblemDefinition> {
    let expect_params = |allowed: &[&str]| -> Result<()> {
        for key in params.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(TvError::InvalidParameter {
                    name: format!("params.{key}"),
                    reason: format!("problem `{name}` accepts only {allowed:?}"),
                });
            }
        }
        Ok(())
    };
    match name {
        "quartic" => {
            expect_params(&["b"])?;
            Ok(builtin_quartic(params.get("b").copied().unwrap_or(5.0)))
        }
        "ackley-constrained" => {
            expect_params(&["d"])?;
            builtin_ackley_constrained(params.get("d").copied().unwrap_or(0.01))
        }
        "tracking-quadratic" => {
            expect_params(&["omega"])?;
            builtin_tracking_quadratic(params.get("omega").copied().unwrap_or(1.0))
        }
        other => Err(TvError::InvalidParameter {
            name: "problem".into(),
            reason: format!(
                "unknown builtin `{other}`; available: quartic, ackley-constrained, tracking-quadratic"
            ),
        }),
    }
}
