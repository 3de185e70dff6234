//! Solver correctness against the active-set oracle and the contracts the
//! rest of the stack leans on: determinism, uniqueness, duality.

use diffqp::{
    kkt_residual, oracle, solve, solve_with_initialization, InteriorInit, QpSolution,
    SolverConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_active_set_oracle_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let config = SolverConfig::default();
    for trial in 0..40 {
        let m = rng.gen_range(3..=10);
        let p = rng.gen_range(0..=6);
        let r = rng.gen_range(0..=2.min(m - 1));
        let qp = oracle::random_qp(&mut rng, m, p, r);
        let expected = oracle::active_set_solve(&qp).expect("generated problems are feasible");
        let got = solve(&qp, &config).expect("solver failed");
        assert!(
            got.residual <= config.tolerance,
            "trial {trial}: did not converge, residual {}",
            got.residual
        );
        let err = (&got.z_star - &expected.z_star).amax();
        assert!(
            err <= 1e-6,
            "trial {trial} (m={m} p={p} r={r}): primal mismatch {err:.3e}"
        );
    }
}

#[test]
fn six_variable_problem_matches_oracle_to_1e6() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let qp = oracle::random_qp(&mut rng, 6, 4, 1);
        let expected = oracle::active_set_solve(&qp).unwrap();
        let got = solve(&qp, &SolverConfig::default()).unwrap();
        assert!((&got.z_star - &expected.z_star).amax() <= 1e-6);
        assert!((&got.lambda_star - &expected.lambda_star).amax() <= 1e-5);
    }
}

#[test]
fn solve_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let qp = oracle::random_qp(&mut rng, 8, 5, 2);
    let a = solve(&qp, &SolverConfig::default()).unwrap();
    let b = solve(&qp, &SolverConfig::default()).unwrap();
    assert_eq!(a.z_star, b.z_star);
    assert_eq!(a.lambda_star, b.lambda_star);
    assert_eq!(a.nu_star, b.nu_star);
    assert_eq!(a.iterations, b.iterations);
    assert!(a.residual == b.residual);
}

#[test]
fn distinct_interior_starts_reach_the_same_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // Tight tolerance: uniqueness is a statement about the optimum, so the
    // two runs must both be close to it before they can be close to each
    // other.
    let config = SolverConfig {
        tolerance: 1e-10,
        max_iterations: 100,
        ..SolverConfig::default()
    };
    for _ in 0..10 {
        let m = rng.gen_range(3..=8);
        let p = rng.gen_range(1..=5);
        let qp = oracle::random_qp(&mut rng, m, p, 0);

        let init_a = InteriorInit {
            z: DVector::zeros(m),
            s: DVector::from_element(p, 1.0),
            lambda: DVector::from_element(p, 1.0),
            nu: DVector::zeros(0),
        };
        let init_b = InteriorInit {
            z: DVector::from_fn(m, |i, _| if i % 2 == 0 { 2.0 } else { -1.5 }),
            s: DVector::from_element(p, 7.0),
            lambda: DVector::from_element(p, 0.3),
            nu: DVector::zeros(0),
        };
        let a = solve_with_initialization(&qp, &config, &init_a).unwrap();
        let b = solve_with_initialization(&qp, &config, &init_b).unwrap();
        assert!(a.residual <= config.tolerance);
        assert!(b.residual <= config.tolerance);
        assert!(
            (&a.z_star - &b.z_star).amax() <= 1e-6,
            "optima differ by {:.3e}",
            (&a.z_star - &b.z_star).amax()
        );
    }
}

#[test]
fn primal_and_dual_objectives_meet_at_the_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20 {
        let m = rng.gen_range(3..=10);
        let p = rng.gen_range(0..=6);
        let r = rng.gen_range(0..=2.min(m - 1));
        let qp = oracle::random_qp(&mut rng, m, p, r);
        let sol = solve(&qp, &SolverConfig::default()).unwrap();
        let primal = qp.objective(&sol.z_star);
        let dual = oracle::dual_objective(&qp, &sol.lambda_star, &sol.nu_star).unwrap();
        assert!(
            (primal - dual).abs() <= 1e-6,
            "duality gap {:.3e}",
            (primal - dual).abs()
        );
    }
}

#[test]
fn converged_solution_beats_random_candidates_on_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let qp = oracle::random_qp(&mut rng, 6, 4, 1);
    let sol = solve(&qp, &SolverConfig::default()).unwrap();
    let solved_residual = kkt_residual(&qp, &sol).unwrap().max();
    for _ in 0..100 {
        let cand = QpSolution::candidate(
            DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0)),
            DVector::from_fn(4, |_, _| rng.gen_range(0.0..2.0)),
            DVector::from_fn(1, |_, _| rng.gen_range(-2.0..2.0)),
        );
        let cand_residual = kkt_residual(&qp, &cand).unwrap().max();
        assert!(solved_residual < cand_residual);
    }
}

#[test]
fn converged_residual_components_are_all_small() {
    let qp = diffqp::QpProblem::with_inequalities(
        DMatrix::identity(2, 2),
        DVector::from_vec(vec![-3.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
        DVector::from_vec(vec![1.0, 0.5]),
    )
    .unwrap();
    let sol = solve(&qp, &SolverConfig::default()).unwrap();
    let res = kkt_residual(&qp, &sol).unwrap();
    assert!(res.stationarity <= 1e-8);
    assert!(res.complementarity <= 1e-8);
    assert!(res.primal_eq <= 1e-8);
    assert!(res.primal_ineq_violation <= 1e-8);
    assert!(sol.lambda_star.iter().all(|&l| l >= -1e-8));
}

#[test]
fn multiplier_sign_and_complementarity_hold_at_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..20 {
        let qp = oracle::random_qp(&mut rng, 7, 5, 1);
        let sol = solve(&qp, &SolverConfig::default()).unwrap();
        assert!(sol.lambda_star.iter().all(|&l| l >= -1e-8));
        let slack = qp.h() - qp.g() * &sol.z_star;
        for i in 0..qp.num_ineq() {
            assert!(
                (sol.lambda_star[i] * slack[i]).abs() <= 1e-6,
                "complementary slackness violated"
            );
        }
    }
}
