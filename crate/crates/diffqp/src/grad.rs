//! Implicit differentiation of the QP solution map.
//!
//! At an optimum the KKT conditions pin (z, lambda, nu) as implicit functions
//! of the coefficient data. Differentiating them gives a linear system in the
//! same reduced KKT matrix the solver factored last, so one backsolve against
//! the retained factorization yields the gradient of a scalar loss with
//! respect to every coefficient block:
//!
//! ```text
//!     K [v_z; v_l; v_n] = [dL/dz; 0; 0]
//!     dq = -v_z                 dh = v_l              db = v_n
//!     dP = -sym(v_z z')         dG = -(l v_z' + v_l z')
//!                               dA = -(n v_z' + v_n z')
//! ```
//!
//! The second KKT row is pre-scaled by 1/lambda (it is the slack-eliminated
//! solver form), which is what makes K symmetric and v_l the multiplier
//! sensitivity directly; no division by lambda appears anywhere.

use nalgebra::{DMatrix, DVector};

use crate::problem::{QpError, QpProblem, QpSolution, SolverConfig};
use crate::solver::solve;

/// Gradients of a scalar loss with respect to each QP coefficient block.
#[derive(Debug, Clone, PartialEq)]
pub struct QpGradients {
    pub dp: DMatrix<f64>,
    pub dq: DVector<f64>,
    pub dg: DMatrix<f64>,
    pub dh: DVector<f64>,
    pub da: DMatrix<f64>,
    pub db: DVector<f64>,
}

impl QpGradients {
    /// All-zero gradients shaped like `problem`.
    pub fn zeros_like(problem: &QpProblem) -> Self {
        let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
        Self {
            dp: DMatrix::zeros(m, m),
            dq: DVector::zeros(m),
            dg: DMatrix::zeros(p, m),
            dh: DVector::zeros(p),
            da: DMatrix::zeros(r, m),
            db: DVector::zeros(r),
        }
    }

    fn dims_match(&self, problem: &QpProblem) -> bool {
        let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
        self.dp.nrows() == m
            && self.dp.ncols() == m
            && self.dq.len() == m
            && self.dg.nrows() == p
            && self.dg.ncols() == m
            && self.dh.len() == p
            && self.da.nrows() == r
            && self.da.ncols() == m
            && self.db.len() == r
    }
}

/// Pull `dL/dz_star` back to gradients on (P, q, G, h, A, b).
///
/// Differentiates at the iterate the solution describes, whether or not it is
/// fully converged, reusing `solution.kkt_factor` for a single backsolve.
pub fn backward(
    problem: &QpProblem,
    solution: &QpSolution,
    dl_dz: &DVector<f64>,
) -> Result<QpGradients, QpError> {
    let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
    if dl_dz.len() != m {
        return Err(QpError::DimensionMismatch(format!(
            "dL/dz has length {}, expected {m}",
            dl_dz.len()
        )));
    }
    if solution.z_star.len() != m || solution.lambda_star.len() != p || solution.nu_star.len() != r
    {
        return Err(QpError::DimensionMismatch(
            "solution dimensions do not match problem".into(),
        ));
    }
    let factor = solution
        .kkt_factor
        .as_ref()
        .ok_or(QpError::StaleFactorization)?;
    if factor.dims() != (m, p, r) {
        return Err(QpError::DimensionMismatch(
            "retained factorization does not match problem dimensions".into(),
        ));
    }

    let mut rhs = DVector::zeros(m + p + r);
    rhs.rows_mut(0, m).copy_from(dl_dz);
    let v = factor.solve(&rhs).ok_or(QpError::SingularSystem)?;
    if !v.iter().all(|x| x.is_finite()) {
        return Err(QpError::SingularSystem);
    }
    let v_z = v.rows(0, m).into_owned();
    let v_l = v.rows(m, p).into_owned();
    let v_n = v.rows(m + p, r).into_owned();

    let z = &solution.z_star;
    let vz_zt = &v_z * z.transpose();
    let dp = -0.5 * (&vz_zt + vz_zt.transpose());
    let dq = -&v_z;
    let dg = -(&solution.lambda_star * v_z.transpose() + &v_l * z.transpose());
    let dh = v_l;
    let da = -(&solution.nu_star * v_z.transpose() + &v_n * z.transpose());
    let db = v_n;

    Ok(QpGradients {
        dp,
        dq,
        dg,
        dh,
        da,
        db,
    })
}

/// Directional derivative of `z_star` along a coefficient perturbation,
/// computed from the retained factorization. The perturbation's `dp` block is
/// symmetrized before use.
fn directional_derivative(
    problem: &QpProblem,
    solution: &QpSolution,
    direction: &QpGradients,
) -> Result<DVector<f64>, QpError> {
    let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
    let factor = solution
        .kkt_factor
        .as_ref()
        .ok_or(QpError::StaleFactorization)?;

    let dp_sym = 0.5 * (&direction.dp + direction.dp.transpose());
    let z = &solution.z_star;

    let mut row_z = &dp_sym * z + &direction.dq;
    if p > 0 {
        row_z += direction.dg.transpose() * &solution.lambda_star;
    }
    if r > 0 {
        row_z += direction.da.transpose() * &solution.nu_star;
    }
    let mut rhs = DVector::zeros(m + p + r);
    rhs.rows_mut(0, m).copy_from(&(-row_z));
    if p > 0 {
        rhs.rows_mut(m, p)
            .copy_from(&(-(&direction.dg * z - &direction.dh)));
    }
    if r > 0 {
        rhs.rows_mut(m + p, r)
            .copy_from(&(-(&direction.da * z - &direction.db)));
    }
    let mut xi = factor.solve(&rhs).ok_or(QpError::SingularSystem)?;
    if !xi.iter().all(|x| x.is_finite()) {
        return Err(QpError::SingularSystem);
    }
    // Refine against the unregularized system so the comparison is limited
    // by finite-difference noise, not by the factorization's diagonal shift.
    let exact = crate::solver::exact_kkt_at(problem, z, &solution.lambda_star);
    for _ in 0..2 {
        let defect = &rhs - &exact * &xi;
        let Some(correction) = factor.solve(&defect) else {
            break;
        };
        if !correction.iter().all(|x| x.is_finite()) {
            break;
        }
        xi += correction;
    }
    Ok(xi.rows(0, m).into_owned())
}

fn apply_direction(
    problem: &QpProblem,
    direction: &QpGradients,
    t: f64,
) -> Result<QpProblem, QpError> {
    let dp_sym = 0.5 * (&direction.dp + direction.dp.transpose());
    QpProblem::new(
        problem.p() + t * dp_sym,
        problem.q() + t * &direction.dq,
        problem.g() + t * &direction.dg,
        problem.h() + t * &direction.dh,
        problem.a() + t * &direction.da,
        problem.b() + t * &direction.db,
    )
}

/// Compare the implicit directional derivative of `z_star` along `direction`
/// against a central finite difference of two full re-solves with the given
/// `step`, returning the relative error
/// `||fd - implicit|| / (||implicit|| + 1e-12)`.
///
/// Intended for strictly convex, strictly complementary problems; at weakly
/// active constraints the solution map is not differentiable and the returned
/// error is diagnostic only.
pub fn jacobian_vector_check(
    problem: &QpProblem,
    direction: &QpGradients,
    step: f64,
) -> Result<f64, QpError> {
    if !direction.dims_match(problem) {
        return Err(QpError::DimensionMismatch(
            "direction dimensions do not match problem".into(),
        ));
    }
    if !(1e-7..=1e-3).contains(&step) {
        return Err(QpError::InvalidConfig(
            "finite-difference step must lie in [1e-7, 1e-3]".into(),
        ));
    }

    let tight = SolverConfig {
        tolerance: 1e-10,
        max_iterations: 100,
        ..SolverConfig::default()
    };
    let base = solve(problem, &tight)?;
    let implicit = directional_derivative(problem, &base, direction)?;

    let plus = solve(&apply_direction(problem, direction, step)?, &tight)?;
    let minus = solve(&apply_direction(problem, direction, -step)?, &tight)?;
    let fd = (plus.z_star - minus.z_star) / (2.0 * step);

    Ok((fd - &implicit).norm() / (implicit.norm() + 1e-12))
}
