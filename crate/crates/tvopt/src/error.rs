use nalgebra::DVector;
use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum TvError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("evaluator `{evaluator}` produced a non-finite value at x = {x:?}, t = {t}")]
    EvaluationFailure {
        evaluator: String,
        x: Vec<f64>,
        t: f64,
    },

    #[error(
        "constraint Jacobian is rank-deficient at t = {t} (sigma_min = {sigma_min:.3e}, \
         tolerance = {tol:.3e}); the constraints must have full row rank"
    )]
    RankDeficient { t: f64, sigma_min: f64, tol: f64 },

    #[error("initial point is infeasible: |g(x0, t0)| = {residual:.3e} exceeds {tol:.3e}")]
    InfeasibleStart { residual: f64, tol: f64 },

    #[error("Newton retraction onto the constraint set failed at t = {t} (residual {residual:.3e} after {iters} iterations)")]
    RetractionFailure { t: f64, residual: f64, iters: usize },

    #[error("Newton refinement did not converge at t = {t}: residual {residual:.3e} after {iters} iterations")]
    RefinementFailure { t: f64, residual: f64, iters: usize },

    #[error("refined point is not a strict local minimum at t = {t}: reduced Hessian min eigenvalue = {min_eig:.3e}")]
    NotAMinimum { t: f64, min_eig: f64 },

    #[error("lost the minimum branch at t = {t}: refined point moved {moved:.3e}, guard was {guard:.3e}")]
    BranchLoss { t: f64, moved: f64, guard: f64 },

    #[error("sampling failed in {context}: {reason}")]
    SamplingFailure { context: String, reason: String },

    #[error("no usable equilibrium branch: {reason}")]
    NoEquilibriumBranch { reason: String },

    #[error("certificate refused: {reason}")]
    CertificateRefused { reason: String },

    #[error("scenario field `{field}`: {reason}")]
    ScenarioValidation { field: String, reason: String },

    #[error("scenario parse error: {0}")]
    ScenarioParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv output error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json output error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TvError>;

pub(crate) fn ensure_finite_vec(v: &DVector<f64>, evaluator: &str, x: &DVector<f64>, t: f64) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(TvError::EvaluationFailure {
            evaluator: evaluator.to_string(),
            x: x.iter().copied().collect(),
            t,
        })
    }
}

pub(crate) fn ensure_finite_scalar(s: f64, evaluator: &str, x: &DVector<f64>, t: f64) -> Result<()> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(TvError::EvaluationFailure {
            evaluator: evaluator.to_string(),
            x: x.iter().copied().collect(),
            t,
        })
    }
}
