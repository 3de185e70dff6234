//! Reference implementations the solver is checked against, plus random
//! problem generators. Everything here takes the slow, obviously-correct
//! route: the optimum is found by enumerating active sets and solving pure
//! equality systems, and gradients are approximated by re-solving under
//! coefficient perturbations. None of it shares code with the interior-point
//! iteration or the implicit backward pass.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::grad::QpGradients;
use crate::problem::{kkt_residual, QpError, QpProblem, QpSolution, SolverConfig};
use crate::solver::solve;

/// Primal feasibility slack tolerated when accepting an active-set candidate.
const FEAS_TOL: f64 = 1e-8;
/// Most-negative multiplier tolerated for dual feasibility.
const DUAL_TOL: f64 = 1e-8;

/// Solve a strictly convex QP by brute force: for every subset of the
/// inequality constraints, treat the subset as active (tight), solve the
/// resulting equality-constrained KKT system exactly, and keep the feasible
/// candidate with dual-feasible multipliers and the lowest objective.
///
/// Returns `None` when no subset yields a feasible candidate, which for a
/// strictly convex problem means the constraints are inconsistent. Intended
/// for small problems only; cost grows as `2^p`.
pub fn active_set_solve(problem: &QpProblem) -> Option<QpSolution> {
    let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
    assert!(p <= 20, "active-set enumeration is exponential in p");

    let mut best: Option<(f64, QpSolution)> = None;
    for mask in 0u32..(1u32 << p) {
        let active: Vec<usize> = (0..p).filter(|i| mask & (1 << i) != 0).collect();
        // More tight constraints than degrees of freedom leaves a generically
        // singular system; skip.
        if active.len() + r > m {
            continue;
        }
        let na = active.len();
        let n = m + na + r;
        let mut k = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        k.view_mut((0, 0), (m, m)).copy_from(problem.p());
        rhs.rows_mut(0, m).copy_from(&(-problem.q()));
        for (row, &i) in active.iter().enumerate() {
            for j in 0..m {
                k[(m + row, j)] = problem.g()[(i, j)];
                k[(j, m + row)] = problem.g()[(i, j)];
            }
            rhs[m + row] = problem.h()[i];
        }
        if r > 0 {
            k.view_mut((0, m + na), (m, r))
                .copy_from(&problem.a().transpose());
            k.view_mut((m + na, 0), (r, m)).copy_from(problem.a());
            rhs.rows_mut(m + na, r).copy_from(problem.b());
        }

        let lu = k.clone().lu();
        let Some(x) = lu.solve(&rhs) else { continue };
        // Guard against ill-conditioned subsets producing garbage.
        if (&k * &x - &rhs).amax() > 1e-6 * (1.0 + rhs.amax()) {
            continue;
        }

        let z = x.rows(0, m).into_owned();
        let mut lambda = DVector::zeros(p);
        let mut dual_ok = true;
        for (row, &i) in active.iter().enumerate() {
            lambda[i] = x[m + row];
            if x[m + row] < -DUAL_TOL {
                dual_ok = false;
            }
        }
        if !dual_ok {
            continue;
        }
        let nu = x.rows(m + na, r).into_owned();

        let mut feasible = true;
        if p > 0 {
            let gz = problem.g() * &z;
            for i in 0..p {
                if gz[i] - problem.h()[i] > FEAS_TOL * (1.0 + problem.h()[i].abs()) {
                    feasible = false;
                    break;
                }
            }
        }
        if !feasible {
            continue;
        }

        let obj = problem.objective(&z);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            let mut sol = QpSolution::candidate(z, lambda.map(|v| v.max(0.0)), nu);
            sol.residual = kkt_residual(problem, &sol)
                .map(|res| res.max())
                .unwrap_or(f64::INFINITY);
            best = Some((obj, sol));
        }
    }
    best.map(|(_, sol)| sol)
}

/// Lagrangian dual value at `(lambda, nu)` for a strictly convex problem:
/// `-1/2 w' P^-1 w - lambda'h - nu'b` with `w = q + G'lambda + A'nu`.
/// `None` when `P` is not positive definite.
pub fn dual_objective(
    problem: &QpProblem,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> Option<f64> {
    let chol = nalgebra::Cholesky::new(problem.p().clone())?;
    let mut w = problem.q().clone();
    if problem.num_ineq() > 0 {
        w += problem.g().transpose() * lambda;
    }
    if problem.num_eq() > 0 {
        w += problem.a().transpose() * nu;
    }
    let pinv_w = chol.solve(&w);
    let mut val = -0.5 * w.dot(&pinv_w);
    if problem.num_ineq() > 0 {
        val -= lambda.dot(problem.h());
    }
    if problem.num_eq() > 0 {
        val -= nu.dot(problem.b());
    }
    Some(val)
}

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

/// Random strictly convex QP with a guaranteed strictly feasible point:
/// `P = M'M + 0.1 I`, inequalities satisfied with slack at a reference point,
/// equalities exactly satisfied there.
pub fn random_qp<R: Rng + ?Sized>(rng: &mut R, m: usize, p: usize, r: usize) -> QpProblem {
    let mm = random_matrix(rng, m, m);
    let mut pmat = mm.transpose() * &mm;
    for i in 0..m {
        pmat[(i, i)] += 0.1;
    }
    let q = random_vector(rng, m);
    let z0 = random_vector(rng, m);
    let g = random_matrix(rng, p, m);
    let slack = Uniform::new(0.1, 1.1);
    let h = &g * &z0 + DVector::from_fn(p, |_, _| slack.sample(rng));
    let a = random_matrix(rng, r, m);
    let b = &a * &z0;
    QpProblem::new(pmat, q, g, h, a, b).expect("generated problem is well formed")
}

/// Rejection-sample a random QP whose oracle solution is strictly
/// complementary: every constraint is either clearly active
/// (`lambda >= margin`, slack ~ 0) or clearly inactive (slack `>= margin`,
/// `lambda ~ 0`). Returns the problem with its oracle solution.
pub fn random_strictly_complementary_qp<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    p: usize,
    r: usize,
    margin: f64,
) -> (QpProblem, QpSolution) {
    loop {
        let qp = random_qp(rng, m, p, r);
        let Some(sol) = active_set_solve(&qp) else {
            continue;
        };
        let slack = qp.h() - qp.g() * &sol.z_star;
        let strict = (0..p).all(|i| {
            let active = sol.lambda_star[i] >= margin && slack[i].abs() <= 1e-7;
            let inactive = slack[i] >= margin && sol.lambda_star[i] <= 1e-7;
            active || inactive
        });
        if strict {
            return (qp, sol);
        }
    }
}

/// Gradients of `L = dl_dz . z_star(data)` by central differences: each
/// coefficient is perturbed by `step` in both directions and the problem
/// re-solved to tolerance 1e-10. Off-diagonal `P` entries are perturbed in
/// symmetric pairs and the sensitivity split evenly, matching the symmetrized
/// convention of the implicit backward pass.
pub fn finite_difference_gradients(
    problem: &QpProblem,
    dl_dz: &DVector<f64>,
    step: f64,
) -> Result<QpGradients, QpError> {
    let (m, p, r) = (problem.num_vars(), problem.num_ineq(), problem.num_eq());
    let tight = SolverConfig {
        tolerance: 1e-10,
        max_iterations: 100,
        ..SolverConfig::default()
    };
    let loss_at = |qp: &QpProblem| -> Result<f64, QpError> {
        Ok(dl_dz.dot(&solve(qp, &tight)?.z_star))
    };
    let central = |plus: &QpProblem, minus: &QpProblem| -> Result<f64, QpError> {
        Ok((loss_at(plus)? - loss_at(minus)?) / (2.0 * step))
    };

    let mut grads = QpGradients::zeros_like(problem);

    for i in 0..m {
        for j in i..m {
            let mut dp = DMatrix::zeros(m, m);
            dp[(i, j)] += step;
            dp[(j, i)] += step;
            if i == j {
                dp[(i, i)] = step;
            }
            let plus = QpProblem::new(
                problem.p() + &dp,
                problem.q().clone(),
                problem.g().clone(),
                problem.h().clone(),
                problem.a().clone(),
                problem.b().clone(),
            )?;
            let minus = QpProblem::new(
                problem.p() - &dp,
                problem.q().clone(),
                problem.g().clone(),
                problem.h().clone(),
                problem.a().clone(),
                problem.b().clone(),
            )?;
            let fd = central(&plus, &minus)?;
            if i == j {
                grads.dp[(i, i)] = fd;
            } else {
                grads.dp[(i, j)] = fd / 2.0;
                grads.dp[(j, i)] = fd / 2.0;
            }
        }
    }

    for i in 0..m {
        let mut qp = problem.q().clone();
        qp[i] += step;
        let mut qm = problem.q().clone();
        qm[i] -= step;
        let plus = QpProblem::new(
            problem.p().clone(),
            qp,
            problem.g().clone(),
            problem.h().clone(),
            problem.a().clone(),
            problem.b().clone(),
        )?;
        let minus = QpProblem::new(
            problem.p().clone(),
            qm,
            problem.g().clone(),
            problem.h().clone(),
            problem.a().clone(),
            problem.b().clone(),
        )?;
        grads.dq[i] = central(&plus, &minus)?;
    }

    for i in 0..p {
        for j in 0..m {
            let mut gp = problem.g().clone();
            gp[(i, j)] += step;
            let mut gm = problem.g().clone();
            gm[(i, j)] -= step;
            let plus = QpProblem::new(
                problem.p().clone(),
                problem.q().clone(),
                gp,
                problem.h().clone(),
                problem.a().clone(),
                problem.b().clone(),
            )?;
            let minus = QpProblem::new(
                problem.p().clone(),
                problem.q().clone(),
                gm,
                problem.h().clone(),
                problem.a().clone(),
                problem.b().clone(),
            )?;
            grads.dg[(i, j)] = central(&plus, &minus)?;
        }
    }

    for i in 0..p {
        let mut hp = problem.h().clone();
        hp[i] += step;
        let mut hm = problem.h().clone();
        hm[i] -= step;
        let plus = QpProblem::new(
            problem.p().clone(),
            problem.q().clone(),
            problem.g().clone(),
            hp,
            problem.a().clone(),
            problem.b().clone(),
        )?;
        let minus = QpProblem::new(
            problem.p().clone(),
            problem.q().clone(),
            problem.g().clone(),
            hm,
            problem.a().clone(),
            problem.b().clone(),
        )?;
        grads.dh[i] = central(&plus, &minus)?;
    }

    for i in 0..r {
        for j in 0..m {
            let mut ap = problem.a().clone();
            ap[(i, j)] += step;
            let mut am = problem.a().clone();
            am[(i, j)] -= step;
            let plus = QpProblem::new(
                problem.p().clone(),
                problem.q().clone(),
                problem.g().clone(),
                problem.h().clone(),
                ap,
                problem.b().clone(),
            )?;
            let minus = QpProblem::new(
                problem.p().clone(),
                problem.q().clone(),
                problem.g().clone(),
                problem.h().clone(),
                am,
                problem.b().clone(),
            )?;
            grads.da[(i, j)] = central(&plus, &minus)?;
        }
    }

    for i in 0..r {
        let mut bp = problem.b().clone();
        bp[i] += step;
        let mut bm = problem.b().clone();
        bm[i] -= step;
        let plus = QpProblem::new(
            problem.p().clone(),
            problem.q().clone(),
            problem.g().clone(),
            problem.h().clone(),
            problem.a().clone(),
            bp,
        )?;
        let minus = QpProblem::new(
            problem.p().clone(),
            problem.q().clone(),
            problem.g().clone(),
            problem.h().clone(),
            problem.a().clone(),
            bm,
        )?;
        grads.db[i] = central(&plus, &minus)?;
    }

    Ok(grads)
}
