//! Problem declarations: objective, equality constraints, and their derivatives.
//!
//! A [`ProblemDefinition`] bundles the evaluators of a time-varying program
//!
//! ```text
//! minimize f(x, t)   subject to   g(x, t) = 0
//! ```
//!
//! with `x` in R^n and `g` mapping into R^m (m may be 0). All evaluators are
//! plain closures shared behind `Arc`, so definitions are cheap to clone and
//! safe to use from worker threads.

mod builtins;
mod trajectory;

pub use builtins::{
    ackley_frame, ackley_frame_dot, ackley_point_on_parabola, builtin_ackley_constrained, builtin_by_name,
    builtin_quartic, builtin_tracking_quadratic, ACKLEY_SPURIOUS_OFFSET, QUARTIC_MIN_OFFSETS,
};
pub use trajectory::{MinTrajectory, TrajectoryKind};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_finite_scalar, ensure_finite_vec, Result, TvError};

type ScalarFn = Arc<dyn Fn(&DVector<f64>, f64) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
/// Hessian of one constraint component, selected by index.
type ConstraintHessFn = Arc<dyn Fn(&DVector<f64>, f64, usize) -> DMatrix<f64> + Send + Sync>;

/// A time-varying equality-constrained problem with user-declared derivatives.
#[derive(Clone)]
pub struct ProblemDefinition {
    n: usize,
    m: usize,
    f: ScalarFn,
    grad_f: VectorFn,
    hess_f: Option<MatrixFn>,
    g: VectorFn,
    jac_g: MatrixFn,
    gprime: VectorFn,
    jac_g_prime: Option<MatrixFn>,
    hess_g: Option<ConstraintHessFn>,
    lower_bound: Option<f64>,
    name: String,
}

impl fmt::Debug for ProblemDefinition {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("ProblemDefinition")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("lower_bound", &self.lower_bound)
            .finish()
    }
}

impl ProblemDefinition {
    /// Starts a definition for an unconstrained problem (`m = 0`).
    pub fn unconstrained<F, G>(n: usize, f: F, grad_f: G) -> ProblemBuilder
    where
        F: Fn(&DVector<f64>, f64) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        ProblemBuilder::new(n, 0, Arc::new(f), Arc::new(grad_f))
    }

    /// Starts a definition for a constrained problem with `m` equality constraints.
    pub fn constrained<F, G>(n: usize, m: usize, f: F, grad_f: G) -> ProblemBuilder
    where
        F: Fn(&DVector<f64>, f64) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        ProblemBuilder::new(n, m, Arc::new(f), Arc::new(grad_f))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Declared lower bound on `f` over all `(x, t)`, if any.
    pub fn lower_bound(&self) -> Option<f64> {
        self.lower_bound
    }

    pub fn f(&self, x: &DVector<f64>, t: f64) -> f64 {
        (self.f)(x, t)
    }

    pub fn grad_f(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.grad_f)(x, t)
    }

    pub fn has_hess_f(&self) -> bool {
        self.hess_f.is_some()
    }

    /// Objective Hessian: analytic if declared, otherwise a central finite
    /// difference of `grad_f` (symmetrized).
    pub fn hess_f(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        if let Some(h) = &self.hess_f {
            h(x, t)
        } else {
            let j = fd_jacobian_x(&*self.grad_f, x, t);
            (&j + j.transpose()) * 0.5
        }
    }

    pub fn g(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.g)(x, t)
    }

    /// Constraint Jacobian with respect to `x` (m-by-n).
    pub fn jac_g(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.jac_g)(x, t)
    }

    /// Partial derivative of `g` with respect to `t`.
    pub fn gprime(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.gprime)(x, t)
    }

    pub fn has_jac_g_prime(&self) -> bool {
        self.jac_g_prime.is_some()
    }

    pub fn jac_g_prime(&self, x: &DVector<f64>, t: f64) -> Option<DMatrix<f64>> {
        self.jac_g_prime.as_ref().map(|j| j(x, t))
    }

    pub fn has_hess_g(&self) -> bool {
        self.hess_g.is_some()
    }

    /// Hessian of constraint component `k`: analytic if declared, otherwise a
    /// finite difference of the corresponding Jacobian row.
    pub fn hess_g_k(&self, x: &DVector<f64>, t: f64, k: usize) -> DMatrix<f64> {
        if let Some(h) = &self.hess_g {
            h(x, t, k)
        } else {
            let jac = self.jac_g.clone();
            let row = move |x: &DVector<f64>, t: f64| jac(x, t).row(k).transpose();
            fd_jacobian_x(&row, x, t)
        }
    }

    /// Evaluates `f` and errors out on a non-finite result.
    pub fn f_checked(&self, x: &DVector<f64>, t: f64) -> Result<f64> {
        let v = self.f(x, t);
        ensure_finite_scalar(v, "f", x, t)?;
        Ok(v)
    }

    /// Evaluates `grad_f` and errors out on a non-finite result.
    pub fn grad_f_checked(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let v = self.grad_f(x, t);
        ensure_finite_vec(&v, "grad_f", x, t)?;
        Ok(v)
    }

    /// Evaluates `g` and errors out on a non-finite result.
    pub fn g_checked(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let v = self.g(x, t);
        ensure_finite_vec(&v, "g", x, t)?;
        Ok(v)
    }

    /// Euclidean norm of the constraint residual.
    pub fn feasibility_residual(&self, x: &DVector<f64>, t: f64) -> f64 {
        if self.m == 0 {
            0.0
        } else {
            self.g(x, t).norm()
        }
    }
}

/// Builder for [`ProblemDefinition`]. Constraint evaluators default to the
/// empty (m = 0) case and must be supplied when `m > 0`.
pub struct ProblemBuilder {
    n: usize,
    m: usize,
    f: ScalarFn,
    grad_f: VectorFn,
    hess_f: Option<MatrixFn>,
    g: Option<VectorFn>,
    jac_g: Option<MatrixFn>,
    gprime: Option<VectorFn>,
    jac_g_prime: Option<MatrixFn>,
    hess_g: Option<ConstraintHessFn>,
    lower_bound: Option<f64>,
    name: String,
}

impl ProblemBuilder {
    fn new(n: usize, m: usize, f: ScalarFn, grad_f: VectorFn) -> Self {
        Self {
            n,
            m,
            f,
            grad_f,
            hess_f: None,
            g: None,
            jac_g: None,
            gprime: None,
            jac_g_prime: None,
            hess_g: None,
            lower_bound: None,
            name: "custom".to_string(),
        }
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn hess_f<H>(mut self, h: H) -> Self
    where
        H: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.hess_f = Some(Arc::new(h));
        self
    }

    pub fn constraints<G, J, P>(mut self, g: G, jac_g: J, gprime: P) -> Self
    where
        G: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
        P: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        self.g = Some(Arc::new(g));
        self.jac_g = Some(Arc::new(jac_g));
        self.gprime = Some(Arc::new(gprime));
        self
    }

    pub fn jac_g_prime<J>(mut self, j: J) -> Self
    where
        J: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jac_g_prime = Some(Arc::new(j));
        self
    }

    pub fn hess_g<H>(mut self, h: H) -> Self
    where
        H: Fn(&DVector<f64>, f64, usize) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.hess_g = Some(Arc::new(h));
        self
    }

    pub fn lower_bound(mut self, m: f64) -> Self {
        self.lower_bound = Some(m);
        self
    }

    pub fn build(self) -> Result<ProblemDefinition> {
        if self.n == 0 {
            return Err(TvError::InvalidParameter {
                name: "n".into(),
                reason: "dimension must be positive".into(),
            });
        }
        if self.m >= self.n {
            return Err(TvError::InvalidParameter {
                name: "m".into(),
                reason: format!("need m < n for a nontrivial feasible manifold, got m = {}, n = {}", self.m, self.n),
            });
        }
        let (g, jac_g, gprime) = if self.m == 0 {
            let n = self.n;
            let g: VectorFn = Arc::new(move |_x: &DVector<f64>, _t: f64| DVector::zeros(0));
            let j: MatrixFn = Arc::new(move |_x: &DVector<f64>, _t: f64| DMatrix::zeros(0, n));
            let p: VectorFn = Arc::new(move |_x: &DVector<f64>, _t: f64| DVector::zeros(0));
            (g, j, p)
        } else {
            match (self.g, self.jac_g, self.gprime) {
                (Some(g), Some(j), Some(p)) => (g, j, p),
                _ => {
                    return Err(TvError::InvalidParameter {
                        name: "constraints".into(),
                        reason: format!("m = {} requires g, jac_g and gprime evaluators", self.m),
                    })
                }
            }
        };
        Ok(ProblemDefinition {
            n: self.n,
            m: self.m,
            f: self.f,
            grad_f: self.grad_f,
            hess_f: self.hess_f,
            g,
            jac_g,
            gprime,
            jac_g_prime: self.jac_g_prime,
            hess_g: self.hess_g,
            lower_bound: self.lower_bound,
            name: self.name,
        })
    }
}

/// Result of checking one declared derivative against finite differences.
#[derive(Debug, Clone)]
pub struct DerivativeCheck {
    pub evaluator: String,
    pub max_deviation: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Report over all declared derivatives at all probe points.
#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub checks: Vec<DerivativeCheck>,
    pub passed: bool,
}

/// Fourth-order central difference of a scalar function along one coordinate.
fn central_diff<F: FnMut(f64) -> f64>(mut f: F, v: f64, h: f64) -> f64 {
    (-f(v + 2.0 * h) + 8.0 * f(v + h) - 8.0 * f(v - h) + f(v - 2.0 * h)) / (12.0 * h)
}

fn fd_grad_x<F: Fn(&DVector<f64>, f64) -> f64>(f: &F, x: &DVector<f64>, t: f64, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut xp = x.clone();
        central_diff(
            |v| {
                xp[i] = v;
                f(&xp, t)
            },
            x[i],
            h,
        )
    })
}

/// Finite-difference Jacobian in `x` of a vector-valued evaluator, one column
/// per coordinate. Used both for checking and as the Hessian fallback.
fn fd_jacobian_x<F: Fn(&DVector<f64>, f64) -> DVector<f64> + ?Sized>(
    f: &F,
    x: &DVector<f64>,
    t: f64,
) -> DMatrix<f64> {
    fd_jacobian_x_step(f, x, t, 1e-5)
}

fn fd_jacobian_x_step<F: Fn(&DVector<f64>, f64) -> DVector<f64> + ?Sized>(
    f: &F,
    x: &DVector<f64>,
    t: f64,
    h: f64,
) -> DMatrix<f64> {
    let rows = f(x, t).len();
    let mut jac = DMatrix::zeros(rows, x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let col_at = |v: f64, xp: &mut DVector<f64>| {
            xp[j] = v;
            f(xp, t)
        };
        let fp2 = col_at(x[j] + 2.0 * h, &mut xp);
        let fp1 = col_at(x[j] + h, &mut xp);
        let fm1 = col_at(x[j] - h, &mut xp);
        let fm2 = col_at(x[j] - 2.0 * h, &mut xp);
        xp[j] = x[j];
        let col = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

fn fd_vec_t<F: Fn(&DVector<f64>, f64) -> DVector<f64>>(f: &F, x: &DVector<f64>, t: f64, h: f64) -> DVector<f64> {
    (-f(x, t + 2.0 * h) + 8.0 * f(x, t + h) - 8.0 * f(x, t - h) + f(x, t - 2.0 * h)) / (12.0 * h)
}

// Helper to wrap `fd_jacobian_x` for matrix-valued t-derivatives.
fn fd_mat_t<F: Fn(&DVector<f64>, f64) -> DMatrix<f64>>(f: &F, x: &DVector<f64>, t: f64, h: f64) -> DMatrix<f64> {
    (-f(x, t + 2.0 * h) + f(x, t + h) * 8.0 - f(x, t - h) * 8.0 + f(x, t - 2.0 * h)) / (12.0 * h)
}

/// Checks every declared analytic derivative against central finite
/// differences at the given probe points.
///
/// A check passes when the maximum absolute deviation stays below
/// `10 * step^2 * (1 + |analytic value|)`. Any non-finite evaluation is an
/// error naming the offending evaluator and point.
pub fn check_derivatives(
    p: &ProblemDefinition,
    points: &[(DVector<f64>, f64)],
    step: f64,
) -> Result<DerivativeReport> {
    if step <= 0.0 {
        return Err(TvError::InvalidParameter {
            name: "step".into(),
            reason: "finite-difference step must be positive".into(),
        });
    }
    let mut checks: Vec<DerivativeCheck> = Vec::new();
    let record = |name: &str, dev: f64, scale: f64, checks: &mut Vec<DerivativeCheck>| {
        let threshold = 10.0 * step * step * (1.0 + scale);
        checks.push(DerivativeCheck {
            evaluator: name.to_string(),
            max_deviation: dev,
            threshold,
            passed: dev <= threshold,
        });
    };

    let mut dev_grad: f64 = 0.0;
    let mut scale_grad: f64 = 0.0;
    let mut dev_jac: f64 = 0.0;
    let mut scale_jac: f64 = 0.0;
    let mut dev_gp: f64 = 0.0;
    let mut scale_gp: f64 = 0.0;
    let mut dev_hf: f64 = 0.0;
    let mut scale_hf: f64 = 0.0;
    let mut dev_jp: f64 = 0.0;
    let mut scale_jp: f64 = 0.0;
    let mut dev_hg: f64 = 0.0;
    let mut scale_hg: f64 = 0.0;

    for (x, t) in points {
        let t = *t;
        ensure_finite_scalar(p.f(x, t), "f", x, t)?;
        let grad = p.grad_f(x, t);
        ensure_finite_vec(&grad, "grad_f", x, t)?;
        let fd = fd_grad_x(&|x: &DVector<f64>, t: f64| p.f(x, t), x, t, step);
        dev_grad = dev_grad.max((&grad - &fd).amax());
        scale_grad = scale_grad.max(grad.norm());

        if p.m() > 0 {
            let g = p.g(x, t);
            ensure_finite_vec(&g, "g", x, t)?;
            let jac = p.jac_g(x, t);
            let fd = fd_jacobian_x_step(&|x: &DVector<f64>, t: f64| p.g(x, t), x, t, step);
            dev_jac = dev_jac.max((&jac - &fd).amax());
            scale_jac = scale_jac.max(jac.norm());

            let gp = p.gprime(x, t);
            ensure_finite_vec(&gp, "gprime", x, t)?;
            let fd = fd_vec_t(&|x: &DVector<f64>, t: f64| p.g(x, t), x, t, step);
            dev_gp = dev_gp.max((&gp - &fd).amax());
            scale_gp = scale_gp.max(gp.norm());
        }

        if p.has_hess_f() {
            let hess = p.hess_f(x, t);
            let fd = fd_jacobian_x_step(&|x: &DVector<f64>, t: f64| p.grad_f(x, t), x, t, step);
            dev_hf = dev_hf.max((&hess - &fd).amax());
            scale_hf = scale_hf.max(hess.norm());
        }

        if p.has_jac_g_prime() {
            let jp = p.jac_g_prime(x, t).expect("declared jac_g_prime");
            let fd = fd_mat_t(&|x: &DVector<f64>, t: f64| p.jac_g(x, t), x, t, step);
            dev_jp = dev_jp.max((&jp - &fd).amax());
            scale_jp = scale_jp.max(jp.norm());
        }

        if p.has_hess_g() {
            for k in 0..p.m() {
                let hg = p.hess_g_k(x, t, k);
                let fd = fd_jacobian_x_step(
                    &|x: &DVector<f64>, t: f64| p.jac_g(x, t).row(k).transpose(),
                    x,
                    t,
                    step,
                );
                dev_hg = dev_hg.max((&hg - &fd).amax());
                scale_hg = scale_hg.max(hg.norm());
            }
        }
    }

    record("grad_f", dev_grad, scale_grad, &mut checks);
    if p.m() > 0 {
        record("jac_g", dev_jac, scale_jac, &mut checks);
        record("gprime", dev_gp, scale_gp, &mut checks);
    }
    if p.has_hess_f() {
        record("hess_f", dev_hf, scale_hf, &mut checks);
    }
    if p.has_jac_g_prime() {
        record("jac_g_prime", dev_jp, scale_jp, &mut checks);
    }
    if p.has_hess_g() {
        record("hess_g", dev_hg, scale_hg, &mut checks);
    }

    let passed = checks.iter().all(|c| c.passed);
    Ok(DerivativeReport { checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic() -> ProblemDefinition {
        ProblemDefinition::unconstrained(
            2,
            |x, _t| 0.5 * x.norm_squared(),
            |x, _t| x.clone(),
        )
        .hess_f(|x, _t| DMatrix::identity(x.len(), x.len()))
        .lower_bound(0.0)
        .build()
        .unwrap()
    }

    #[test]
    fn quadratic_gradient_check_is_exact_to_rounding() {
        let p = quadratic();
        let pts = vec![
            (DVector::from_vec(vec![1.0, 2.0]), 0.0),
            (DVector::from_vec(vec![-3.0, 0.5]), 1.3),
        ];
        let report = check_derivatives(&p, &pts, 1e-4).unwrap();
        assert!(report.passed);
        let grad = report.checks.iter().find(|c| c.evaluator == "grad_f").unwrap();
        assert!(grad.max_deviation <= 1e-8, "deviation {}", grad.max_deviation);
    }

    #[test]
    fn injected_gradient_fault_is_caught() {
        let p = ProblemDefinition::unconstrained(
            1,
            |x, _t| 0.5 * x[0] * x[0],
            |x, _t| DVector::from_vec(vec![x[0] + 1.0]),
        )
        .build()
        .unwrap();
        let pts = vec![(DVector::from_vec(vec![0.7]), 0.0)];
        let report = check_derivatives(&p, &pts, 1e-4).unwrap();
        assert!(!report.passed);
        let grad = &report.checks[0];
        assert!((grad.max_deviation - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let p = ProblemDefinition::unconstrained(
            1,
            |x, _t| 1.0 / x[0],
            |x, _t| DVector::from_vec(vec![-1.0 / (x[0] * x[0])]),
        )
        .build()
        .unwrap();
        let pts = vec![(DVector::from_vec(vec![0.0]), 0.0)];
        let err = check_derivatives(&p, &pts, 1e-4).unwrap_err();
        assert!(matches!(err, TvError::EvaluationFailure { .. }));
    }

    #[test]
    fn builder_rejects_missing_constraint_evaluators() {
        let err = ProblemDefinition::constrained(2, 1, |_x, _t| 0.0, |x, _t| DVector::zeros(x.len()))
            .build()
            .unwrap_err();
        assert!(matches!(err, TvError::InvalidParameter { .. }));
    }
}
