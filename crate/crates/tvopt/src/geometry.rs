//! Constraint geometry at a point: tangent projector, least-squares
//! multipliers, and the right-hand sides of the continuous flows built from
//! them.
//!
//! With `J` the m-by-n constraint Jacobian at `(x, t)` and `G = J J^T`:
//!
//! ```text
//! P = I - J^T G^-1 J          orthogonal projector onto the tangent plane
//! Q = J^T G^-1                minimum-norm right inverse of J
//! lambda     = -G^-1 J grad_f
//! lambda_bar = lambda + alpha G^-1 gprime
//! grad_L     = grad_f + J^T lambda    (equals P grad_f)
//! ```
//!
//! All factorizations go through the m-by-m Gram matrix `G`, which stays tiny
//! even when `n` is large.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TvError};
use crate::problem::{MinTrajectory, ProblemDefinition};

/// Relative tolerance on the smallest eigenvalue of `J J^T` (against
/// `|J|_F^2`) below which the constraints are treated as rank-deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Dimension above which flow right-hand sides avoid forming the dense
/// n-by-n projector and apply it matrix-free instead.
pub const DENSE_PROJECTOR_LIMIT: usize = 200;

/// Constraint geometry quantities at one point.
#[derive(Debug, Clone)]
pub struct GeometryEval {
    pub x: DVector<f64>,
    pub t: f64,
    pub alpha: f64,
    /// Tangent-plane projector, n-by-n.
    pub p: DMatrix<f64>,
    /// Minimum-norm right inverse of the Jacobian, n-by-m.
    pub q: DMatrix<f64>,
    /// Least-squares multipliers.
    pub lambda: DVector<f64>,
    /// Multipliers shifted by the inertia-weighted constraint drift.
    pub lambda_bar: DVector<f64>,
    /// Projected gradient `P grad_f`.
    pub grad_l: DVector<f64>,
    /// Smallest eigenvalue of `J J^T` (infinity when m = 0).
    pub sigma_min: f64,
}

struct Gram {
    jac: DMatrix<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    sigma_min: f64,
}

fn gram_factor(p: &ProblemDefinition, x: &DVector<f64>, t: f64) -> Result<Gram> {
    let jac = p.jac_g(x, t);
    if p.m() == 0 {
        return Ok(Gram { jac, chol: None, sigma_min: f64::INFINITY });
    }
    let gram = &jac * jac.transpose();
    let sigma_min = gram
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let scale = jac.norm_squared();
    if !(sigma_min > RANK_TOL * scale) {
        return Err(TvError::RankDeficient { t, sigma_min, tol: RANK_TOL * scale });
    }
    let chol = gram.cholesky().ok_or(TvError::RankDeficient {
        t,
        sigma_min,
        tol: RANK_TOL * scale,
    })?;
    Ok(Gram { jac, chol: Some(chol), sigma_min })
}

impl Gram {
    /// `G^-1 v` for an m-vector.
    fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            Some(c) => c.solve(v),
            None => DVector::zeros(0),
        }
    }
}

/// Evaluates projector, right inverse, multipliers and projected gradient at
/// `(x, t)`. Requires `alpha >= 0`; with `alpha = 0` the shifted multipliers
/// equal the plain ones exactly.
pub fn evaluate_geometry(p: &ProblemDefinition, x: &DVector<f64>, t: f64, alpha: f64) -> Result<GeometryEval> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(TvError::InvalidParameter {
            name: "alpha".into(),
            reason: format!("inertia must be finite and non-negative, got {alpha}"),
        });
    }
    let n = p.n();
    let grad = p.grad_f_checked(x, t)?;
    let gram = gram_factor(p, x, t)?;
    if p.m() == 0 {
        return Ok(GeometryEval {
            x: x.clone(),
            t,
            alpha,
            p: DMatrix::identity(n, n),
            q: DMatrix::zeros(n, 0),
            lambda: DVector::zeros(0),
            lambda_bar: DVector::zeros(0),
            grad_l: grad,
            sigma_min: f64::INFINITY,
        });
    }
    let jt = gram.jac.transpose();
    // Q = J^T G^-1, column by column through the Cholesky factor.
    let chol = gram.chol.as_ref().expect("m > 0");
    let mut ginv = DMatrix::identity(p.m(), p.m());
    for j in 0..p.m() {
        let col = chol.solve(&ginv.column(j).into_owned());
        ginv.set_column(j, &col);
    }
    let q = &jt * &ginv;
    let proj = DMatrix::identity(n, n) - &q * &gram.jac;
    let lambda = -(&ginv * (&gram.jac * &grad));
    let lambda_bar = if alpha == 0.0 {
        lambda.clone()
    } else {
        let gp = p.gprime(x, t);
        &lambda + &ginv * gp * alpha
    };
    let grad_l = &grad + &jt * &lambda;
    Ok(GeometryEval {
        x: x.clone(),
        t,
        alpha,
        p: proj,
        q,
        lambda,
        lambda_bar,
        grad_l,
        sigma_min: gram.sigma_min,
    })
}

/// Right-hand side of the inertial projected-gradient flow
/// `xdot = -(1/alpha) P grad_f - Q gprime`; reduces to `-(1/alpha) grad_f`
/// when `m = 0`.
pub fn pode_rhs(p: &ProblemDefinition, x: &DVector<f64>, t: f64, alpha: f64) -> Result<DVector<f64>> {
    if !(alpha > 0.0) {
        return Err(TvError::InvalidParameter {
            name: "alpha".into(),
            reason: format!("inertia must be positive, got {alpha}"),
        });
    }
    if p.m() == 0 {
        let grad = p.grad_f_checked(x, t)?;
        return Ok(-grad / alpha);
    }
    if p.n() <= DENSE_PROJECTOR_LIMIT {
        let geo = evaluate_geometry(p, x, t, alpha)?;
        let grad = p.grad_f(x, t);
        let gp = p.gprime(x, t);
        Ok(-(&geo.p * grad) / alpha - &geo.q * gp)
    } else {
        // Matrix-free: P v = v - J^T G^-1 (J v), Q w = J^T G^-1 w.
        let grad = p.grad_f_checked(x, t)?;
        let gp = p.gprime(x, t);
        let gram = gram_factor(p, x, t)?;
        let pv = &grad - gram.jac.transpose() * gram.solve(&(&gram.jac * &grad));
        let qw = gram.jac.transpose() * gram.solve(&gp);
        Ok(-pv / alpha - qw)
    }
}

/// The field `U` governing the offset `e = x - h2(t)` through
/// `edot = -(1/alpha) U(e, t, alpha)`:
///
/// `U = P grad_f + alpha Q gprime + alpha h2dot`, evaluated at `x = e + h2(t)`.
pub fn error_field_u(
    p: &ProblemDefinition,
    e: &DVector<f64>,
    t: f64,
    alpha: f64,
    h2: &MinTrajectory,
) -> Result<DVector<f64>> {
    if !(alpha > 0.0) {
        return Err(TvError::InvalidParameter {
            name: "alpha".into(),
            reason: format!("inertia must be positive, got {alpha}"),
        });
    }
    let x = e + h2.h(t);
    let geo = evaluate_geometry(p, &x, t, alpha)?;
    let grad = p.grad_f(&x, t);
    let gp = p.gprime(&x, t);
    let mut u = &geo.p * grad + geo.q * gp * alpha;
    u += h2.hdot(t) * alpha;
    Ok(u)
}

/// Absolute inner product between the projected gradient and the constraint
/// drift `Q gprime`; zero in exact arithmetic because the two factors live in
/// orthogonal subspaces.
pub fn orthogonality_check(p: &ProblemDefinition, x: &DVector<f64>, t: f64) -> Result<f64> {
    let geo = evaluate_geometry(p, x, t, 1.0)?;
    if p.m() == 0 {
        return Ok(0.0);
    }
    let gp = p.gprime(x, t);
    let drift = &geo.q * gp;
    Ok((geo.grad_l.dot(&drift)).abs())
}

/// Value of the landscape seen by the offset variable `e = x - h2(t)` at a
/// frozen time: the objective (or the Lagrangian with shifted multipliers when
/// constraints are present) plus the inertial tilt `alpha h2dot . e`. Values
/// are shifted so the minimum over the grid is zero.
pub fn reshaped_landscape(
    p: &ProblemDefinition,
    h2: &MinTrajectory,
    t: f64,
    alpha: f64,
    grid: &[DVector<f64>],
) -> Result<Vec<(DVector<f64>, f64)>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(TvError::InvalidParameter {
            name: "alpha".into(),
            reason: format!("inertia must be nonnegative, got {alpha}"),
        });
    }
    let hdot = h2.hdot(t);
    let base = h2.h(t);
    let mut vals = Vec::with_capacity(grid.len());
    for e in grid {
        let x = e + &base;
        let v = if p.m() == 0 {
            p.f_checked(&x, t)? + alpha * hdot.dot(e)
        } else {
            let geo = evaluate_geometry(p, &x, t, alpha)?;
            let g = p.g(&x, t);
            p.f_checked(&x, t)? + geo.lambda_bar.dot(&g) + alpha * hdot.dot(e)
        };
        vals.push((e.clone(), v));
    }
    let min = vals.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    for (_, v) in &mut vals {
        *v -= min;
    }
    Ok(vals)
}

/// Newton retraction onto the feasible set at frozen time: iterates
/// `x <- x - J^T (J J^T)^-1 g(x, t)` until `|g| <= tol`.
pub fn newton_retract(
    p: &ProblemDefinition,
    x: &DVector<f64>,
    t: f64,
    tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>> {
    if p.m() == 0 {
        return Ok(x.clone());
    }
    let mut x = x.clone();
    let mut res = p.g_checked(&x, t)?.norm();
    for it in 0..=max_iters {
        if res <= tol {
            return Ok(x);
        }
        if it == max_iters {
            break;
        }
        let gram = gram_factor(p, &x, t)?;
        let g = p.g(&x, t);
        x -= gram.jac.transpose() * gram.solve(&g);
        res = p.g_checked(&x, t)?.norm();
    }
    Err(TvError::RetractionFailure { t, residual: res, iters: max_iters })
}

/// Orthonormal basis of the tangent plane (null space of the Jacobian),
/// n-by-(n-m), from the spectral decomposition of the projector.
pub fn tangent_basis(geo: &GeometryEval) -> DMatrix<f64> {
    let n = geo.p.nrows();
    let m = geo.q.ncols();
    let eig = geo.p.clone().symmetric_eigen();
    let mut cols: Vec<(f64, DVector<f64>)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
        .collect();
    cols.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite eigenvalues"));
    let mut basis = DMatrix::zeros(n, n - m);
    for j in 0..(n - m) {
        basis.set_column(j, &cols[j].1);
    }
    basis
}
