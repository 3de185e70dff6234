//! Slow, independent reference implementations used to cross-check the QP
//! learners: an accelerated projected-gradient solver for the multiclass SVM
//! dual, the ridge normal equations, and a brute-force nearest-mean
//! classifier. Nothing here touches the interior-point path.

use nalgebra::{DMatrix, DVector};

use crate::error::FewshotError;
use crate::learners::{SupportSet, GRAM_JITTER};

/// Objective of the multiclass SVM dual at `alpha` (n_s x K):
/// `1/2 sum_k alpha_k' (Gram + jitter I) alpha_k - sum_n alpha[n][y_n]`.
pub fn svm_dual_objective(support: &SupportSet, alpha: &DMatrix<f64>) -> f64 {
    let gram = jittered_gram(support);
    let mut value = 0.0;
    for k in 0..support.num_classes {
        let col = alpha.column(k);
        value += 0.5 * col.dot(&(&gram * col));
    }
    for n in 0..support.num_samples() {
        value -= alpha[(n, support.labels[n])];
    }
    value
}

/// Exact Euclidean projection of `v` onto `{x : x <= u, sum(x) = 0}`.
///
/// The projection is `x_k = min(v_k - tau, u_k)` for the unique shift `tau`
/// at which the coordinate sum vanishes. The sum is piecewise linear and
/// nonincreasing in `tau` with breakpoints `v_k - u_k` (below its breakpoint
/// a coordinate is pinned at `u_k`, above it floats at `v_k - tau`), so the
/// root is found by releasing coordinates in breakpoint order. Requires
/// `sum(u) >= 0`, otherwise the set is empty.
pub fn project_box_zero_sum(v: &[f64], u: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), u.len());
    assert!(!v.is_empty());
    let total_u: f64 = u.iter().sum();
    assert!(
        total_u >= 0.0,
        "the set {{x <= u, sum x = 0}} is empty when sum(u) < 0"
    );
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| (v[a] - u[a]).partial_cmp(&(v[b] - u[b])).unwrap());

    let mut clamped_u = total_u;
    let mut floating_v = 0.0;
    let mut tau = f64::NAN;
    for (released, &idx) in order.iter().enumerate() {
        floating_v += v[idx];
        clamped_u -= u[idx];
        // With `released + 1` floating coordinates the sum is
        // clamped_u + floating_v - count * tau; its root is valid while it
        // stays below the next breakpoint.
        let candidate = (clamped_u + floating_v) / (released + 1) as f64;
        let next_break = order
            .get(released + 1)
            .map(|&j| v[j] - u[j])
            .unwrap_or(f64::INFINITY);
        if candidate <= next_break {
            tau = candidate;
            break;
        }
    }
    debug_assert!(tau.is_finite());
    v.iter()
        .zip(u)
        .map(|(&vi, &ui)| (vi - tau).min(ui))
        .collect()
}

fn jittered_gram(support: &SupportSet) -> DMatrix<f64> {
    let f = &support.features;
    let mut gram = f * f.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += GRAM_JITTER;
    }
    gram
}

/// Solve the multiclass SVM dual by accelerated projected gradient descent
/// until the fixed-point residual `|x - proj(x - step * grad(x))|_inf` drops
/// to `tol`. Independent of the interior-point solver; used as an oracle.
pub fn svm_dual_projected_gradient(
    support: &SupportSet,
    c: f64,
    max_iterations: usize,
    tol: f64,
) -> Result<DMatrix<f64>, FewshotError> {
    let n_s = support.num_samples();
    let k = support.num_classes;
    let gram = jittered_gram(support);

    // Gradient Lipschitz constant: the largest Gram eigenvalue, by power
    // iteration from a deterministic start.
    let mut pow = DVector::from_element(n_s, 1.0 / (n_s as f64).sqrt());
    let mut lipschitz: f64 = GRAM_JITTER;
    for _ in 0..100 {
        pow = &gram * &pow;
        let norm = pow.norm();
        if norm <= f64::MIN_POSITIVE {
            break;
        }
        lipschitz = norm;
        pow /= norm;
    }
    // Slack on the estimate keeps the step valid if power iteration is short.
    let step = 1.0 / (1.01 * lipschitz);

    // Per-sample bounds: c on the true class, 0 elsewhere.
    let bounds: Vec<Vec<f64>> = (0..n_s)
        .map(|n| {
            (0..k)
                .map(|class| if support.labels[n] == class { c } else { 0.0 })
                .collect()
        })
        .collect();

    let project = |alpha: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n_s, k);
        for n in 0..n_s {
            let row: Vec<f64> = (0..k).map(|class| alpha[(n, class)]).collect();
            let projected = project_box_zero_sum(&row, &bounds[n]);
            for class in 0..k {
                out[(n, class)] = projected[class];
            }
        }
        out
    };
    let gradient = |alpha: &DMatrix<f64>| -> DMatrix<f64> {
        let mut grad = &gram * alpha;
        for n in 0..n_s {
            grad[(n, support.labels[n])] -= 1.0;
        }
        grad
    };
    let residual = |alpha: &DMatrix<f64>| -> f64 {
        (project(&(alpha - step * gradient(alpha))) - alpha).amax()
    };

    let mut x = DMatrix::zeros(n_s, k);
    let mut momentum = x.clone();
    let mut t = 1.0f64;
    for iter in 0..max_iterations {
        let x_next = project(&(&momentum - step * gradient(&momentum)));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let diff = &x_next - &x;
        // Gradient restart: drop momentum when the extrapolation points
        // against the step just taken.
        if (&momentum - &x_next).dot(&diff) > 0.0 {
            momentum = x_next.clone();
            t = 1.0;
        } else {
            momentum = &x_next + ((t - 1.0) / t_next) * &diff;
            t = t_next;
        }
        x = x_next;
        if iter % 50 == 49 && residual(&x) <= tol {
            return Ok(x);
        }
    }
    if residual(&x) <= tol {
        Ok(x)
    } else {
        Err(FewshotError::InvalidConfig(format!(
            "projected gradient did not reach tol {tol} within {max_iterations} iterations"
        )))
    }
}

/// Ridge dual coefficients by the normal equations: one Cholesky solve of
/// `(Gram + lambda I) alpha_k = y_k` per one-hot class column.
pub fn ridge_closed_form(support: &SupportSet, lambda: f64) -> Result<DMatrix<f64>, FewshotError> {
    let n_s = support.num_samples();
    let k = support.num_classes;
    let f = &support.features;
    let mut system = f * f.transpose();
    for i in 0..n_s {
        system[(i, i)] += lambda;
    }
    let chol = system.cholesky().ok_or_else(|| {
        FewshotError::InvalidConfig("Gram + lambda I is not positive definite".into())
    })?;
    let mut alpha = DMatrix::zeros(n_s, k);
    for class in 0..k {
        let mut y = DVector::zeros(n_s);
        for n in 0..n_s {
            if support.labels[n] == class {
                y[n] = 1.0;
            }
        }
        alpha.set_column(class, &chol.solve(&y));
    }
    Ok(alpha)
}

/// Predict each query's class by the smallest squared distance to any
/// class-mean prototype, computed with plain loops.
pub fn brute_force_nearest_mean(support: &SupportSet, queries: &DMatrix<f64>) -> Vec<usize> {
    let k = support.num_classes;
    let d = support.feature_dim();
    let counts = support.class_counts();
    let mut means = vec![vec![0.0f64; d]; k];
    for n in 0..support.num_samples() {
        let y = support.labels[n];
        for c in 0..d {
            means[y][c] += support.features[(n, c)] / counts[y] as f64;
        }
    }
    (0..queries.nrows())
        .map(|i| {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for (class, mean) in means.iter().enumerate() {
                let mut dist = 0.0;
                for c in 0..d {
                    let diff = queries[(i, c)] - mean[c];
                    dist += diff * diff;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = class;
                }
            }
            best
        })
        .collect()
}
