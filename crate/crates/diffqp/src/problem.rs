//! Standard-form convex quadratic programs and their primal-dual solutions.
//!
//! A problem is
//!
//! ```text
//!     minimize    1/2 z' P z + q' z
//!     subject to  G z <= h
//!                 A z  = b
//! ```
//!
//! with `P` symmetric positive semidefinite. Either constraint block may be
//! empty.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::solver::KktFactor;

/// Errors produced by problem construction, the solver, and the backward pass.
#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("objective matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    AsymmetricObjective { max_asymmetry: f64 },
    #[error("objective matrix is not positive semidefinite within tolerance")]
    NotPositiveSemidefinite,
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("KKT matrix is singular even after diagonal regularization")]
    SingularKkt,
    #[error("primal residual diverged; the problem appears infeasible")]
    Infeasible,
    #[error("solution carries no retained KKT factorization")]
    StaleFactorization,
    #[error("differential KKT system is singular")]
    SingularSystem,
}

/// Convex QP in the standard form above.
///
/// Construction validates symmetry of `P` (entrywise, tolerance `1e-10`
/// relative to the largest entry) and positive semidefiniteness
/// (smallest eigenvalue `>= -1e-8 * ||P||`, checked via a shifted Cholesky
/// factorization). Empty `G`/`A` blocks are legal and must have `m` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self, QpError> {
        let m = q.len();
        if m == 0 {
            return Err(QpError::DimensionMismatch(
                "problem must have at least one variable".into(),
            ));
        }
        if p.nrows() != m || p.ncols() != m {
            return Err(QpError::DimensionMismatch(format!(
                "P is {}x{}, expected {m}x{m}",
                p.nrows(),
                p.ncols()
            )));
        }
        if g.ncols() != m {
            return Err(QpError::DimensionMismatch(format!(
                "G has {} columns, expected {m}",
                g.ncols()
            )));
        }
        if g.nrows() != h.len() {
            return Err(QpError::DimensionMismatch(format!(
                "G has {} rows but h has length {}",
                g.nrows(),
                h.len()
            )));
        }
        if a.ncols() != m {
            return Err(QpError::DimensionMismatch(format!(
                "A has {} columns, expected {m}",
                a.ncols()
            )));
        }
        if a.nrows() != b.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A has {} rows but b has length {}",
                a.nrows(),
                b.len()
            )));
        }

        let scale = p.amax().max(1.0);
        let mut max_asymmetry = 0.0f64;
        for i in 0..m {
            for j in (i + 1)..m {
                max_asymmetry = max_asymmetry.max((p[(i, j)] - p[(j, i)]).abs());
            }
        }
        if max_asymmetry > 1e-10 * scale {
            return Err(QpError::AsymmetricObjective { max_asymmetry });
        }

        // Cholesky of P + delta*I succeeds iff lambda_min(P) > -delta.
        let delta = 1e-8 * p.norm() + 1e-12;
        let mut shifted = p.clone();
        for i in 0..m {
            shifted[(i, i)] += delta;
        }
        if nalgebra::Cholesky::new(shifted).is_none() {
            return Err(QpError::NotPositiveSemidefinite);
        }

        Ok(Self { p, q, g, h, a, b })
    }

    /// Problem with no constraints at all.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Result<Self, QpError> {
        let m = q.len();
        Self::new(
            p,
            q,
            DMatrix::zeros(0, m),
            DVector::zeros(0),
            DMatrix::zeros(0, m),
            DVector::zeros(0),
        )
    }

    /// Inequality-constrained problem (no equalities).
    pub fn with_inequalities(
        p: DMatrix<f64>,
        q: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self, QpError> {
        let m = q.len();
        Self::new(p, q, g, h, DMatrix::zeros(0, m), DVector::zeros(0))
    }

    /// Number of optimization variables `m`.
    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    /// Number of inequality constraints `p`.
    pub fn num_ineq(&self) -> usize {
        self.g.nrows()
    }

    /// Number of equality constraints `r`.
    pub fn num_eq(&self) -> usize {
        self.a.nrows()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// Objective value `1/2 z'Pz + q'z`.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (&self.p * z).dot(z) + self.q.dot(z)
    }
}

/// Solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Iteration budget for `solve`.
    pub max_iterations: usize,
    /// Convergence threshold on the largest KKT residual block norm.
    pub tolerance: f64,
    /// Signed diagonal shift applied to the KKT matrix before factorization
    /// (`+` on the primal block, `-` on the dual blocks).
    pub kkt_regularization: f64,
    /// Fraction-to-boundary rule: step length is capped at this fraction of
    /// the distance to the nonnegativity boundary of `(s, lambda)`.
    pub step_fraction: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-8,
            kkt_regularization: 1e-9,
            step_fraction: 0.99,
        }
    }
}

impl SolverConfig {
    pub(crate) fn validate(&self) -> Result<(), QpError> {
        if self.max_iterations < 1 {
            return Err(QpError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(QpError::InvalidConfig("tolerance must be > 0".into()));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            return Err(QpError::InvalidConfig(
                "step_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.kkt_regularization < 0.0 {
            return Err(QpError::InvalidConfig(
                "kkt_regularization must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Primal-dual optimum returned by the solver.
///
/// `kkt_factor` is the LU factorization of the KKT matrix assembled at the
/// returned iterate; the backward pass reuses it for a single backsolve.
#[derive(Clone)]
pub struct QpSolution {
    /// Primal optimum.
    pub z_star: DVector<f64>,
    /// Inequality multipliers, elementwise nonnegative at convergence.
    pub lambda_star: DVector<f64>,
    /// Equality multipliers.
    pub nu_star: DVector<f64>,
    /// Retained factorization; `None` only for hand-built candidates.
    pub kkt_factor: Option<KktFactor>,
    /// Interior-point iterations performed.
    pub iterations: usize,
    /// Largest KKT residual block norm at the returned iterate.
    pub residual: f64,
}

impl QpSolution {
    /// A bare candidate point with no factorization, for residual checks.
    pub fn candidate(
        z_star: DVector<f64>,
        lambda_star: DVector<f64>,
        nu_star: DVector<f64>,
    ) -> Self {
        Self {
            z_star,
            lambda_star,
            nu_star,
            kkt_factor: None,
            iterations: 0,
            residual: f64::INFINITY,
        }
    }
}

impl std::fmt::Debug for QpSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QpSolution")
            .field("z_star", &self.z_star)
            .field("lambda_star", &self.lambda_star)
            .field("nu_star", &self.nu_star)
            .field("kkt_factor", &self.kkt_factor.as_ref().map(|_| "LU"))
            .field("iterations", &self.iterations)
            .field("residual", &self.residual)
            .finish()
    }
}

/// KKT residual of a candidate point, split by block.
///
/// The blocks are the stationarity norm `||Pz + q + G'lambda + A'nu||`,
/// the complementarity norm `||lambda .* (Gz - h)||`, the equality residual
/// `||Az - b||`, and the inequality violation `||max(Gz - h, 0)||`, all in
/// the Euclidean norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    pub stationarity: f64,
    pub complementarity: f64,
    pub primal_eq: f64,
    pub primal_ineq_violation: f64,
}

impl KktResidual {
    /// Largest block norm; the solver's convergence measure.
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.complementarity)
            .max(self.primal_eq)
            .max(self.primal_ineq_violation)
    }

    /// The four blocks as a vector, in the order documented on the type.
    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.stationarity,
            self.complementarity,
            self.primal_eq,
            self.primal_ineq_violation,
        ])
    }
}

pub(crate) fn residual_parts(
    problem: &QpProblem,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> KktResidual {
    let (p, r) = (problem.num_ineq(), problem.num_eq());

    let mut stat = problem.p() * z + problem.q();
    if p > 0 {
        stat += problem.g().transpose() * lambda;
    }
    if r > 0 {
        stat += problem.a().transpose() * nu;
    }

    let (comp, ineq_violation) = if p > 0 {
        let slack_signed = problem.g() * z - problem.h();
        let comp = slack_signed.component_mul(lambda).norm();
        let violation = slack_signed.map(|v| v.max(0.0)).norm();
        (comp, violation)
    } else {
        (0.0, 0.0)
    };

    let primal_eq = if r > 0 {
        (problem.a() * z - problem.b()).norm()
    } else {
        0.0
    };

    KktResidual {
        stationarity: stat.norm(),
        complementarity: comp,
        primal_eq,
        primal_ineq_violation: ineq_violation,
    }
}

/// Evaluate the blockwise KKT residual of `candidate` on `problem`.
pub fn kkt_residual(problem: &QpProblem, candidate: &QpSolution) -> Result<KktResidual, QpError> {
    let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
    if candidate.z_star.len() != m
        || candidate.lambda_star.len() != p
        || candidate.nu_star.len() != r
    {
        return Err(QpError::DimensionMismatch(format!(
            "candidate dims ({}, {}, {}) do not match problem dims ({m}, {p}, {r})",
            candidate.z_star.len(),
            candidate.lambda_star.len(),
            candidate.nu_star.len()
        )));
    }
    Ok(residual_parts(
        problem,
        &candidate.z_star,
        &candidate.lambda_star,
        &candidate.nu_star,
    ))
}
