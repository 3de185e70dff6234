//! Dense convex quadratic programming with a differentiable solution map.
//!
//! [`solve`] runs a predictor-corrector interior-point method on problems of
//! the form `min 1/2 z'Pz + q'z` subject to `Gz <= h`, `Az = b`, and retains
//! the final KKT factorization. [`backward`] then pulls a loss gradient on
//! the primal optimum back to all six coefficient blocks with a single
//! backsolve, by implicit differentiation of the KKT conditions.
//!
//! The [`oracle`] module carries slow reference implementations (active-set
//! enumeration, finite differences) used to validate both paths.

mod grad;
mod problem;
mod solver;

pub mod oracle;

pub use grad::{backward, jacobian_vector_check, QpGradients};
pub use problem::{
    kkt_residual, KktResidual, QpError, QpProblem, QpSolution, SolverConfig,
};
pub use solver::{solve, solve_capped, solve_with_initialization, InteriorInit, KktFactor};
