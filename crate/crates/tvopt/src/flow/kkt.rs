//! Refinement of candidate minima by Newton iterations on the stationarity
//! system, with a second-order sufficiency check on the tangent space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TvError};
use crate::geometry::{evaluate_geometry, tangent_basis};
use crate::problem::ProblemDefinition;

/// A locally refined constrained minimizer at a fixed time.
#[derive(Debug, Clone)]
pub struct RefinedMinimum {
    pub x: DVector<f64>,
    pub multipliers: DVector<f64>,
    /// Smallest eigenvalue of the Lagrangian Hessian restricted to the
    /// constraint tangent space (of the plain Hessian when unconstrained).
    pub min_tangent_eig: f64,
    pub stationarity: f64,
    pub iterations: usize,
}

fn lagrangian_hessian(p: &ProblemDefinition, x: &DVector<f64>, t: f64, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
    let mut h = p.hess_f(x, t);
    for k in 0..p.m() {
        let hk = p.hess_g_k(x, t, k);
        h += hk * lambda[k];
    }
    Ok(h)
}

fn kkt_residual(p: &ProblemDefinition, x: &DVector<f64>, t: f64, lambda: &DVector<f64>) -> Result<DVector<f64>> {
    let grad = p.grad_f_checked(x, t)?;
    let n = p.n();
    let m = p.m();
    let mut r = DVector::zeros(n + m);
    let stat = if m > 0 {
        let jac = p.jac_g(x, t);
        grad + jac.transpose() * lambda
    } else {
        grad
    };
    r.rows_mut(0, n).copy_from(&stat);
    if m > 0 {
        r.rows_mut(n, m).copy_from(&p.g_checked(x, t)?);
    }
    Ok(r)
}

fn projected_gradient_fallback(
    p: &ProblemDefinition,
    x0: &DVector<f64>,
    t: f64,
    steps: usize,
) -> Result<DVector<f64>> {
    let mut x = x0.clone();
    let mut step = 1e-2;
    let mut prev_norm = f64::INFINITY;
    for _ in 0..steps {
        let geo = evaluate_geometry(p, &x, t, 0.0)?;
        let norm = geo.grad_l.norm();
        if norm < 1e-12 {
            break;
        }
        if norm > prev_norm {
            step *= 0.5;
        }
        prev_norm = norm;
        x -= &geo.grad_l * step;
        if p.m() > 0 {
            if let Ok(xr) = crate::geometry::newton_retract(p, &x, t, 1e-10, 10) {
                x = xr;
            }
        }
    }
    Ok(x)
}

/// Polishes `x0` into a stationary point of the constrained problem at time
/// `t` by a damped Newton method on the stationarity-plus-feasibility system,
/// then verifies second-order sufficiency. Fails with
/// [`TvError::RefinementFailure`] when Newton stalls away from stationarity,
/// and with [`TvError::NotAMinimum`] when the point is a saddle.
pub fn local_minimum_refine(
    p: &ProblemDefinition,
    x0: &DVector<f64>,
    t: f64,
    tol: f64,
) -> Result<RefinedMinimum> {
    if !(tol > 0.0) {
        return Err(TvError::InvalidParameter {
            name: "tol".into(),
            reason: "stationarity tolerance must be positive".into(),
        });
    }
    let n = p.n();
    let m = p.m();
    let max_iters = 100;

    let mut x = x0.clone();
    let mut lambda = if m > 0 {
        evaluate_geometry(p, &x, t, 0.0)?.lambda
    } else {
        DVector::zeros(0)
    };

    let mut r = kkt_residual(p, &x, t, &lambda)?;
    let mut r_norm = r.norm();
    let mut iterations = 0;
    let mut used_fallback = false;

    while r_norm > tol && iterations < max_iters {
        iterations += 1;
        let h = lagrangian_hessian(p, &x, t, &lambda)?;
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        if m > 0 {
            let jac = p.jac_g(&x, t);
            kkt.view_mut((0, n), (n, m)).copy_from(&jac.transpose());
            kkt.view_mut((n, 0), (m, n)).copy_from(&jac);
        }
        let delta = match kkt.lu().solve(&(-&r)) {
            Some(d) => d,
            None => break,
        };

        // Damped update: halve until the residual actually drops.
        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..30 {
            let x_try = &x + delta.rows(0, n) * scale;
            let l_try = if m > 0 { &lambda + delta.rows(n, m) * scale } else { lambda.clone() };
            match kkt_residual(p, &x_try, t, &l_try) {
                Ok(r_try) => {
                    let norm_try = r_try.norm();
                    if norm_try < r_norm {
                        x = x_try;
                        lambda = l_try;
                        r = r_try;
                        r_norm = norm_try;
                        accepted = true;
                        break;
                    }
                }
                Err(TvError::EvaluationFailure { .. }) => {}
                Err(e) => return Err(e),
            }
            scale *= 0.5;
        }
        if !accepted {
            if used_fallback {
                break;
            }
            // One rescue attempt: walk downhill along the projected gradient,
            // then resume Newton from there.
            used_fallback = true;
            x = projected_gradient_fallback(p, &x, t, 500)?;
            lambda = if m > 0 { evaluate_geometry(p, &x, t, 0.0)?.lambda } else { DVector::zeros(0) };
            r = kkt_residual(p, &x, t, &lambda)?;
            r_norm = r.norm();
        }
    }

    if r_norm > tol {
        return Err(TvError::RefinementFailure { t, residual: r_norm, iters: iterations });
    }

    let h = lagrangian_hessian(p, &x, t, &lambda)?;
    let min_eig = if m > 0 {
        let geo = evaluate_geometry(p, &x, t, 0.0)?;
        let basis = tangent_basis(&geo);
        let reduced = basis.transpose() * &h * &basis;
        let sym = (&reduced + reduced.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.min()
    } else {
        let sym = (&h + h.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.min()
    };
    if min_eig <= 0.0 {
        return Err(TvError::NotAMinimum { t, min_eig });
    }

    Ok(RefinedMinimum { x, multipliers: lambda, min_tangent_eig: min_eig, stationarity: r_norm, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin_ackley_constrained, builtin_quartic, ackley_frame, QUARTIC_MIN_OFFSETS};
    use approx::assert_abs_diff_eq;

    #[test]
    fn refines_quartic_minima() {
        let p = builtin_quartic(5.0);
        let t = 0.7_f64;
        let base = 5.0 * t.sin();
        for off in QUARTIC_MIN_OFFSETS {
            let r = local_minimum_refine(&p, &DVector::from_vec(vec![base + off + 0.05]), t, 1e-10).unwrap();
            assert_abs_diff_eq!(r.x[0], base + off, epsilon = 1e-8);
            assert!(r.min_tangent_eig > 0.0);
        }
    }

    #[test]
    fn rejects_the_local_maximum_between_wells() {
        let p = builtin_quartic(5.0);
        // The stationary offset at -1 is a local maximum (curvature -2).
        let err = local_minimum_refine(&p, &DVector::from_vec(vec![-1.1]), 0.0, 1e-10).unwrap_err();
        match err {
            TvError::NotAMinimum { min_eig, .. } => assert_abs_diff_eq!(min_eig, -2.0, epsilon = 1e-6),
            e => panic!("expected a non-minimum flag, got {e}"),
        }
    }

    #[test]
    fn refines_constrained_ackley_origin() {
        let p = builtin_ackley_constrained(0.01).unwrap();
        let t = 1.3;
        let z = ackley_frame(t);
        let x0 = DVector::from_vec(vec![z[0] + 1e-3, z[1] + 1e-3]);
        let r = local_minimum_refine(&p, &x0, t, 1e-10).unwrap();
        assert_abs_diff_eq!(r.x[0], z[0], epsilon = 1e-7);
        assert_abs_diff_eq!(r.x[1], z[1], epsilon = 1e-7);
        assert!(r.min_tangent_eig > 0.0);
    }
}
