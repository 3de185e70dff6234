//! Mehrotra-style predictor-corrector primal-dual interior-point method.
//!
//! Inequalities are handled through slacks, `Gz + s = h` with `s > 0` and
//! multipliers `lambda > 0`. Each iteration eliminates the slack block and
//! factors the reduced KKT matrix
//!
//! ```text
//!     [ P   G'            A' ]
//!     [ G  -diag(s/lambda) 0 ]
//!     [ A   0              0 ]
//! ```
//!
//! once with dense LU (partial pivoting); predictor and corrector reuse the
//! factorization. After the loop the matrix is factored once more at the
//! returned iterate so the retained handle describes the point the caller
//! actually received, which is what the backward pass differentiates at.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::problem::{residual_parts, QpError, QpProblem, QpSolution, SolverConfig};

/// Iterate magnitude beyond which the problem is declared infeasible.
const DIVERGENCE_LIMIT: f64 = 1e10;
/// Growth factor of the primal residual that signals infeasibility.
const PRIMAL_GROWTH_LIMIT: f64 = 1e4;
/// Growth factor of the inequality multipliers, relative to their starting
/// scale, that signals infeasibility: on solvable problems lambda stays near
/// the true multipliers, on inconsistent constraints it grows without bound
/// while the primal gap cannot close.
const LAMBDA_GROWTH_LIMIT: f64 = 1e4;

/// Opaque LU factorization of the reduced KKT matrix, tagged with the
/// problem dimensions it was assembled for.
#[derive(Clone)]
pub struct KktFactor {
    lu: LU<f64, Dyn, Dyn>,
    num_vars: usize,
    num_ineq: usize,
    num_eq: usize,
}

impl KktFactor {
    /// `(m, p, r)` of the source problem.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.num_vars, self.num_ineq, self.num_eq)
    }

    /// Backsolve against the factored matrix; `None` if `rhs` has the wrong
    /// length or a pivot is exactly zero.
    pub fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        if rhs.len() != self.num_vars + self.num_ineq + self.num_eq {
            return None;
        }
        self.lu.solve(rhs)
    }
}

impl std::fmt::Debug for KktFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KktFactor")
            .field("num_vars", &self.num_vars)
            .field("num_ineq", &self.num_ineq)
            .field("num_eq", &self.num_eq)
            .finish()
    }
}

/// Strictly interior starting point for [`solve_with_initialization`].
#[derive(Debug, Clone)]
pub struct InteriorInit {
    pub z: DVector<f64>,
    pub s: DVector<f64>,
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
}

/// Solve to `config.tolerance`, stopping after `config.max_iterations` at the
/// latest. Hitting the iteration budget is not an error; the caller can tell
/// the two exits apart through `QpSolution::residual`.
pub fn solve(problem: &QpProblem, config: &SolverConfig) -> Result<QpSolution, QpError> {
    config.validate()?;
    run_ipm(problem, config, config.max_iterations, None)
}

/// Same algorithm with a tighter iteration budget: terminates after
/// `min(iteration_cap, iterations to tolerance)` iterations and reports the
/// residual honestly.
pub fn solve_capped(
    problem: &QpProblem,
    config: &SolverConfig,
    iteration_cap: usize,
) -> Result<QpSolution, QpError> {
    config.validate()?;
    if iteration_cap < 1 {
        return Err(QpError::InvalidConfig("iteration_cap must be >= 1".into()));
    }
    run_ipm(problem, config, iteration_cap, None)
}

/// Solve from a caller-chosen strictly interior point instead of the default
/// initialization. Exists so the uniqueness of strictly convex optima can be
/// exercised from distinct starts; `init.s` and `init.lambda` must be
/// elementwise positive. Problems without inequalities ignore `s`/`lambda`.
pub fn solve_with_initialization(
    problem: &QpProblem,
    config: &SolverConfig,
    init: &InteriorInit,
) -> Result<QpSolution, QpError> {
    config.validate()?;
    let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
    if init.z.len() != m || init.s.len() != p || init.lambda.len() != p || init.nu.len() != r {
        return Err(QpError::DimensionMismatch(format!(
            "initialization dims ({}, {}, {}, {}) do not match problem dims ({m}, {p}, {p}, {r})",
            init.z.len(),
            init.s.len(),
            init.lambda.len(),
            init.nu.len()
        )));
    }
    if init.s.iter().any(|&v| v <= 0.0) || init.lambda.iter().any(|&v| v <= 0.0) {
        return Err(QpError::InvalidConfig(
            "initialization must have strictly positive s and lambda".into(),
        ));
    }
    run_ipm(problem, config, config.max_iterations, Some(init))
}

/// Unregularized KKT matrix at a solved point, with the slack scaling
/// reconstructed from the primal solution (`s = max(h - Gz, 0)`). Used to
/// refine backsolves against the exact system the retained factorization
/// approximates.
pub(crate) fn exact_kkt_at(
    problem: &QpProblem,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
) -> DMatrix<f64> {
    let p = problem.num_ineq();
    let d = if p > 0 {
        (problem.h() - problem.g() * z)
            .map(|v| v.max(0.0))
            .component_div(lambda)
    } else {
        DVector::zeros(0)
    };
    assemble_kkt(problem, &d, 0.0)
}

fn assemble_kkt(problem: &QpProblem, d: &DVector<f64>, reg: f64) -> DMatrix<f64> {
    let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
    let n = m + p + r;
    let mut k = DMatrix::zeros(n, n);
    k.view_mut((0, 0), (m, m)).copy_from(problem.p());
    for i in 0..m {
        k[(i, i)] += reg;
    }
    if p > 0 {
        k.view_mut((0, m), (m, p))
            .copy_from(&problem.g().transpose());
        k.view_mut((m, 0), (p, m)).copy_from(problem.g());
        for i in 0..p {
            k[(m + i, m + i)] = -d[i] - reg;
        }
    }
    if r > 0 {
        k.view_mut((0, m + p), (m, r))
            .copy_from(&problem.a().transpose());
        k.view_mut((m + p, 0), (r, m)).copy_from(problem.a());
        for j in 0..r {
            k[(m + p + j, m + p + j)] = -reg;
        }
    }
    k
}

/// Factor the KKT matrix, retrying once with a boosted shift. With any
/// positive shift the matrix is symmetric quasi-definite and hence
/// invertible, so a singular factorization points at degenerate data; with
/// the shift explicitly disabled (reg = 0) there is no retry.
fn factor_kkt(problem: &QpProblem, d: &DVector<f64>, reg: f64) -> Result<KktFactor, QpError> {
    let attempts: &[f64] = if reg > 0.0 { &[1.0, 1e4] } else { &[1.0] };
    for boost in attempts {
        let lu = assemble_kkt(problem, d, reg * boost).lu();
        if lu.is_invertible() {
            return Ok(KktFactor {
                lu,
                num_vars: problem.num_vars(),
                num_ineq: problem.num_ineq(),
                num_eq: problem.num_eq(),
            });
        }
    }
    Err(QpError::SingularKkt)
}

fn solve_finite(factor: &KktFactor, rhs: &DVector<f64>) -> Result<DVector<f64>, QpError> {
    let x = factor.solve(rhs).ok_or(QpError::SingularKkt)?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(QpError::SingularKkt)
    }
}

/// Largest step in [0, inf) keeping `v + alpha*dv` nonnegative.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

fn shift_positive(v: DVector<f64>) -> DVector<f64> {
    let mn = v.min();
    if mn <= 0.0 {
        v.add_scalar(1.0 - mn)
    } else {
        v
    }
}

/// Default start: solve the KKT system with unit slack scaling for the
/// least-squares point (z, w, nu), then split +-w into strictly positive
/// (lambda, s).
fn default_start(
    problem: &QpProblem,
    reg: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>), QpError> {
    let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
    let ones = DVector::from_element(p, 1.0);
    let factor = factor_kkt(problem, &ones, reg)?;
    let mut rhs = DVector::zeros(m + p + r);
    rhs.rows_mut(0, m).copy_from(&(-problem.q()));
    rhs.rows_mut(m, p).copy_from(problem.h());
    if r > 0 {
        rhs.rows_mut(m + p, r).copy_from(problem.b());
    }
    let x = solve_finite(&factor, &rhs)?;
    let z = x.rows(0, m).into_owned();
    let w = x.rows(m, p).into_owned();
    let nu = x.rows(m + p, r).into_owned();
    let s = shift_positive(-&w);
    let lambda = shift_positive(w);
    Ok((z, s, lambda, nu))
}

fn run_ipm(
    problem: &QpProblem,
    config: &SolverConfig,
    budget: usize,
    init: Option<&InteriorInit>,
) -> Result<QpSolution, QpError> {
    let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
    let reg = config.kkt_regularization;

    // Without inequalities the KKT conditions are linear: one Newton solve
    // is exact, so an iteration cap of 1 already returns the optimum.
    if p == 0 {
        let factor = factor_kkt(problem, &DVector::zeros(0), reg)?;
        let mut rhs = DVector::zeros(m + r);
        rhs.rows_mut(0, m).copy_from(&(-problem.q()));
        if r > 0 {
            rhs.rows_mut(m, r).copy_from(problem.b());
        }
        let mut x = solve_finite(&factor, &rhs)?;
        // The factorization carries the diagonal shift; refine against the
        // unshifted matrix so the returned point is the exact Newton
        // solution, not the regularized one.
        let exact = assemble_kkt(problem, &DVector::zeros(0), 0.0);
        for _ in 0..2 {
            let defect = &rhs - &exact * &x;
            x += solve_finite(&factor, &defect)?;
        }
        let z = x.rows(0, m).into_owned();
        let nu = x.rows(m, r).into_owned();
        let residual = residual_parts(problem, &z, &DVector::zeros(0), &nu).max();
        return Ok(QpSolution {
            z_star: z,
            lambda_star: DVector::zeros(0),
            nu_star: nu,
            kkt_factor: Some(factor),
            iterations: 1,
            residual,
        });
    }

    let (mut z, mut s, mut lambda, mut nu) = match init {
        Some(init) => (
            init.z.clone(),
            init.s.clone(),
            init.lambda.clone(),
            init.nu.clone(),
        ),
        None => default_start(problem, reg)?,
    };

    let primal_norm = |z: &DVector<f64>, s: &DVector<f64>| -> f64 {
        let ineq = (problem.g() * z + s - problem.h()).norm_squared();
        let eq = if r > 0 {
            (problem.a() * z - problem.b()).norm_squared()
        } else {
            0.0
        };
        (ineq + eq).sqrt()
    };
    let initial_primal = primal_norm(&z, &s);
    let initial_dual_scale = lambda.amax().max(1.0);

    let mut iterations = 0;
    for _ in 0..budget {
        if residual_parts(problem, &z, &lambda, &nu).max() <= config.tolerance {
            break;
        }

        let d = s.component_div(&lambda);
        let factor = factor_kkt(problem, &d, reg)?;

        let mut f1 = problem.p() * &z + problem.q() + problem.g().transpose() * &lambda;
        if r > 0 {
            f1 += problem.a().transpose() * &nu;
        }
        let f2 = if r > 0 {
            problem.a() * &z - problem.b()
        } else {
            DVector::zeros(0)
        };
        let f3 = problem.g() * &z + &s - problem.h();

        let mut rhs = DVector::zeros(m + p + r);
        rhs.rows_mut(0, m).copy_from(&(-&f1));
        // Predictor targets zero complementarity: the slack-eliminated
        // second block is s - f3.
        rhs.rows_mut(m, p).copy_from(&(&s - &f3));
        if r > 0 {
            rhs.rows_mut(m + p, r).copy_from(&(-&f2));
        }
        let aff = solve_finite(&factor, &rhs)?;
        let dz_aff = aff.rows(0, m).into_owned();
        let dl_aff = aff.rows(m, p).into_owned();
        let ds_aff = -&f3 - problem.g() * &dz_aff;

        let alpha_aff = max_step(&s, &ds_aff).min(max_step(&lambda, &dl_aff)).min(1.0);
        let mu = s.dot(&lambda) / p as f64;
        let mu_aff = (&s + alpha_aff * &ds_aff).dot(&(&lambda + alpha_aff * &dl_aff)) / p as f64;
        let sigma = if mu > 0.0 {
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };

        // Corrector targets sigma*mu*1 - ds_aff.*dl_aff; with c the
        // complementarity rhs, the second block is -f3 - c/lambda.
        let c = DVector::from_element(p, sigma * mu)
            - ds_aff.component_mul(&dl_aff)
            - s.component_mul(&lambda);
        rhs.rows_mut(m, p)
            .copy_from(&(-&f3 - c.component_div(&lambda)));
        let dir = solve_finite(&factor, &rhs)?;
        let dz = dir.rows(0, m).into_owned();
        let dl = dir.rows(m, p).into_owned();
        let dn = dir.rows(m + p, r).into_owned();
        let ds = -&f3 - problem.g() * &dz;

        let alpha = (config.step_fraction * max_step(&s, &ds).min(max_step(&lambda, &dl))).min(1.0);
        z += alpha * &dz;
        s += alpha * &ds;
        lambda += alpha * &dl;
        if r > 0 {
            nu += alpha * &dn;
        }
        iterations += 1;

        let finite = z.iter().all(|v| v.is_finite())
            && s.iter().all(|v| v.is_finite())
            && lambda.iter().all(|v| v.is_finite())
            && nu.iter().all(|v| v.is_finite());
        if !finite
            || lambda.amax() > DIVERGENCE_LIMIT
            || z.amax() > DIVERGENCE_LIMIT
            || primal_norm(&z, &s) > PRIMAL_GROWTH_LIMIT * (1.0 + initial_primal)
            || lambda.amax() > LAMBDA_GROWTH_LIMIT * initial_dual_scale
        {
            return Err(QpError::Infeasible);
        }
    }

    let residual = residual_parts(problem, &z, &lambda, &nu).max();
    // Refactor at the final iterate: gradients are taken at the point the
    // caller sees, not at the previous iterate's scaling.
    let d = s.component_div(&lambda);
    let factor = factor_kkt(problem, &d, reg)?;
    Ok(QpSolution {
        z_star: z,
        lambda_star: lambda,
        nu_star: nu,
        kkt_factor: Some(factor),
        iterations,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_quadratic_solved_in_one_newton_step() {
        // min 1/2 z^2 - z  ->  z* = 1.
        let qp = QpProblem::unconstrained(
            DMatrix::identity(1, 1),
            DVector::from_vec(vec![-1.0]),
        )
        .unwrap();
        let sol = solve(&qp, &SolverConfig::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!((sol.z_star[0] - 1.0).abs() < 1e-10);
        assert!(sol.residual <= 1e-8);
        assert!(sol.kkt_factor.is_some());
    }

    #[test]
    fn active_inequality_recovers_primal_and_dual() {
        // min 1/2 z^2 s.t. -z <= -1: optimum z* = 1 with lambda* = 1.
        let qp = QpProblem::with_inequalities(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DVector::from_vec(vec![-1.0]),
        )
        .unwrap();
        let sol = solve(&qp, &SolverConfig::default()).unwrap();
        assert!((sol.z_star[0] - 1.0).abs() < 1e-6);
        assert!((sol.lambda_star[0] - 1.0).abs() < 1e-6);
        assert!(sol.residual <= 1e-8);
    }

    #[test]
    fn equality_constraint_is_honored() {
        // min 1/2 ||z||^2 s.t. z1 + z2 = 2: optimum (1, 1), nu = -1.
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![2.0]),
        )
        .unwrap();
        let sol = solve(&qp, &SolverConfig::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!((sol.z_star[0] - 1.0).abs() < 1e-8);
        assert!((sol.z_star[1] - 1.0).abs() < 1e-8);
        assert!((sol.nu_star[0] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn contradictory_inequalities_detected_as_infeasible() {
        // z <= -1 and -z <= -2 (z >= 2) cannot both hold.
        let qp = QpProblem::with_inequalities(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -2.0]),
        )
        .unwrap();
        match solve(&qp, &SolverConfig::default()) {
            Err(QpError::Infeasible) => {}
            other => panic!("expected Infeasible, got {other:?}"),
        }
    }

    #[test]
    fn zero_regularization_on_redundant_equalities_reports_singular_kkt() {
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        let config = SolverConfig {
            kkt_regularization: 0.0,
            ..SolverConfig::default()
        };
        match solve(&qp, &config) {
            Err(QpError::SingularKkt) => {}
            other => panic!("expected SingularKkt, got {other:?}"),
        }
        // The default shift solves the same problem fine.
        let sol = solve(&qp, &SolverConfig::default()).unwrap();
        assert!((sol.z_star[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn capped_solve_stops_at_cap_and_reports_residual() {
        // A problem with inequalities needs several iterations; cap at 1.
        let qp = QpProblem::with_inequalities(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-3.0, -4.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        let capped = solve_capped(&qp, &SolverConfig::default(), 1).unwrap();
        assert_eq!(capped.iterations, 1);
        let full = solve(&qp, &SolverConfig::default()).unwrap();
        assert!(full.residual <= 1e-8);
        assert!(capped.residual > full.residual);
    }

    #[test]
    fn interior_initialization_validates_positivity() {
        let qp = QpProblem::with_inequalities(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let init = InteriorInit {
            z: DVector::zeros(1),
            s: DVector::from_vec(vec![0.0]),
            lambda: DVector::from_vec(vec![1.0]),
            nu: DVector::zeros(0),
        };
        assert!(matches!(
            solve_with_initialization(&qp, &SolverConfig::default(), &init),
            Err(QpError::InvalidConfig(_))
        ));
    }
}
