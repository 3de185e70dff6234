//! Convex base learners fit on the support set of one episode.
//!
//! Both QP learners optimize a dual over `m = n_s * K` coefficients laid out
//! class-major: variable `k * n_s + n` is `alpha[n][k]`, the weight of support
//! point `n` in the classifier of class `k`. Classifier weights are recovered
//! linearly from the dual optimum as `W = alpha' * F`, and
//! [`backward_to_support`] routes loss gradients back to the support features
//! through both the Gram matrix inside the QP and that linear recovery.

use diffqp::{backward, solve, solve_capped, QpError, QpProblem, QpSolution, SolverConfig};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::FewshotError;

/// Diagonal shift added to each Gram block of the SVM dual. Duplicate support
/// points make the Gram matrix exactly singular; the interior-point KKT system
/// needs strict convexity in the objective block.
pub const GRAM_JITTER: f64 = 1e-8;

/// Labeled support embeddings for one episode.
///
/// `labels[n]` is a local class index in `[0, num_classes)`. In a standard
/// K-way N-shot episode every class appears exactly N times; the ops below
/// only require that labels are in range (the SVM constructor additionally
/// rejects absent classes).
#[derive(Debug, Clone)]
pub struct SupportSet {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl SupportSet {
    pub fn new(
        features: DMatrix<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, FewshotError> {
        let set = Self {
            features,
            labels,
            num_classes,
        };
        set.check()?;
        Ok(set)
    }

    pub fn num_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// How many support points each class has.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    fn check(&self) -> Result<(), FewshotError> {
        if self.num_classes == 0 {
            return Err(FewshotError::InvalidConfig(
                "support set needs at least one class".into(),
            ));
        }
        if self.labels.len() != self.features.nrows() {
            return Err(FewshotError::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(FewshotError::DimensionMismatch(format!(
                "label {y} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn first_missing_class(&self) -> Option<usize> {
        self.class_counts().iter().position(|&c| c == 0)
    }
}

/// Dual coefficients of a fitted QP learner, one column per class.
#[derive(Debug, Clone)]
pub struct DualVariables {
    /// `n_s x K`; entry `(n, k)` weights support point `n` in class `k`.
    /// For converged SVM solutions rows sum to ~0 and the class-`y_n` entry
    /// lies in `[0, C]` up to solver tolerance.
    pub alpha: DMatrix<f64>,
}

impl DualVariables {
    /// Unpack a class-major stacked QP variable into the `n_s x K` layout.
    pub fn from_stacked(z: &DVector<f64>, num_samples: usize, num_classes: usize) -> Self {
        assert_eq!(z.len(), num_samples * num_classes);
        let alpha = DMatrix::from_fn(num_samples, num_classes, |n, k| z[k * num_samples + n]);
        Self { alpha }
    }

    /// Repack into the class-major stacked layout used by the QP.
    pub fn stacked(&self) -> DVector<f64> {
        let (n_s, k) = self.alpha.shape();
        DVector::from_fn(n_s * k, |i, _| self.alpha[(i % n_s, i / n_s)])
    }
}

/// Linear classifier produced by a fitted learner, rows `w_k` (K x d).
///
/// For the nearest-class-mean learner the rows hold class prototypes instead
/// and scoring goes through squared distances rather than inner products.
#[derive(Debug, Clone)]
pub struct ClassifierWeights {
    pub weights: DMatrix<f64>,
}

/// Which base learner to fit and its fixed hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    SvmCs,
    Ridge,
    NearestClassMean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    /// SVM box bound on the true-class dual coefficient.
    #[serde(default = "default_svm_c")]
    pub svm_c: f64,
    /// Ridge shrinkage added to the Gram diagonal.
    #[serde(default = "default_ridge_lambda")]
    pub ridge_lambda: f64,
    /// Interior-point iteration budget per fit; `None` solves to tolerance.
    #[serde(default = "default_iteration_cap", with = "iteration_cap")]
    pub qp_iteration_cap: Option<usize>,
}

fn default_svm_c() -> f64 {
    0.1
}

fn default_ridge_lambda() -> f64 {
    50.0
}

fn default_iteration_cap() -> Option<usize> {
    Some(3)
}

impl LearnerConfig {
    pub fn new(kind: LearnerKind) -> Self {
        Self {
            kind,
            svm_c: default_svm_c(),
            ridge_lambda: default_ridge_lambda(),
            qp_iteration_cap: default_iteration_cap(),
        }
    }

    pub fn validate(&self) -> Result<(), FewshotError> {
        if !(self.svm_c > 0.0) {
            return Err(FewshotError::InvalidConfig(format!(
                "svm_c must be positive, got {}",
                self.svm_c
            )));
        }
        if !(self.ridge_lambda > 0.0) {
            return Err(FewshotError::InvalidConfig(format!(
                "ridge_lambda must be positive, got {}",
                self.ridge_lambda
            )));
        }
        if self.qp_iteration_cap == Some(0) {
            return Err(FewshotError::InvalidConfig(
                "qp_iteration_cap must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Serializes the iteration cap as an integer or the string `"converged"`.
mod iteration_cap {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Capped(usize),
        Label(String),
    }

    pub fn serialize<S: Serializer>(cap: &Option<usize>, ser: S) -> Result<S::Ok, S::Error> {
        match cap {
            Some(n) => Repr::Capped(*n).serialize(ser),
            None => Repr::Label("converged".into()).serialize(ser),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(de)? {
            Repr::Capped(n) => Ok(Some(n)),
            Repr::Label(s) if s == "converged" => Ok(None),
            Repr::Label(s) => Err(serde::de::Error::custom(format!(
                "expected an iteration count or \"converged\", got \"{s}\""
            ))),
        }
    }
}

/// Inner products of support embeddings, `n_s x n_s`, symmetric PSD.
pub fn gram_matrix(support: &SupportSet) -> DMatrix<f64> {
    &support.features * support.features.transpose()
}

/// Dual of the Crammer-Singer multiclass SVM over the support set.
///
/// Minimizes `1/2 sum_k alpha_k' (Gram + jitter I) alpha_k - sum_n alpha[n][y_n]`
/// subject to the box `alpha[n][y_n] <= c`, `alpha[n][k] <= 0` for `k != y_n`,
/// and the per-sample ties `sum_k alpha[n][k] = 0`. Constraint rows follow the
/// class-major variable order; equality row `n` ties sample `n` across blocks.
pub fn svm_cs_dual_qp(support: &SupportSet, c: f64) -> Result<QpProblem, FewshotError> {
    support.check()?;
    if !(c > 0.0) {
        return Err(FewshotError::InvalidConfig(format!(
            "svm_c must be positive, got {c}"
        )));
    }
    if let Some(class) = support.first_missing_class() {
        return Err(FewshotError::DegenerateClass { class });
    }
    let n_s = support.num_samples();
    let k = support.num_classes;
    let m = n_s * k;

    let mut gram = gram_matrix(support);
    for i in 0..n_s {
        gram[(i, i)] += GRAM_JITTER;
    }
    let mut p = DMatrix::zeros(m, m);
    for blk in 0..k {
        p.view_mut((blk * n_s, blk * n_s), (n_s, n_s)).copy_from(&gram);
    }

    let mut q = DVector::zeros(m);
    let mut h = DVector::zeros(m);
    for n in 0..n_s {
        q[support.labels[n] * n_s + n] = -1.0;
        h[support.labels[n] * n_s + n] = c;
    }
    let g = DMatrix::identity(m, m);

    let mut a = DMatrix::zeros(n_s, m);
    for n in 0..n_s {
        for blk in 0..k {
            a[(n, blk * n_s + n)] = 1.0;
        }
    }
    let b = DVector::zeros(n_s);

    Ok(QpProblem::new(p, q, g, h, a, b)?)
}

/// Dual of one-hot ridge regression over the support set: unconstrained with
/// `P = blkdiag_k(Gram + lambda I)` and the same `q` as the SVM dual. The
/// exact optimum is `alpha_k = (Gram + lambda I)^-1 y_k` per one-hot column.
pub fn ridge_dual_qp(support: &SupportSet, lambda: f64) -> Result<QpProblem, FewshotError> {
    support.check()?;
    if !(lambda > 0.0) {
        return Err(FewshotError::InvalidConfig(format!(
            "ridge_lambda must be positive, got {lambda}"
        )));
    }
    let n_s = support.num_samples();
    let k = support.num_classes;
    let m = n_s * k;

    let mut gram = gram_matrix(support);
    for i in 0..n_s {
        gram[(i, i)] += lambda;
    }
    let mut p = DMatrix::zeros(m, m);
    for blk in 0..k {
        p.view_mut((blk * n_s, blk * n_s), (n_s, n_s)).copy_from(&gram);
    }
    let mut q = DVector::zeros(m);
    for n in 0..n_s {
        q[support.labels[n] * n_s + n] = -1.0;
    }
    Ok(QpProblem::unconstrained(p, q)?)
}

/// Recover classifier rows `w_k = sum_n alpha[n][k] f_n`, i.e. `W = alpha' F`.
pub fn dual_to_weights(
    duals: &DualVariables,
    support: &SupportSet,
) -> Result<ClassifierWeights, FewshotError> {
    let (rows, cols) = duals.alpha.shape();
    if rows != support.num_samples() || cols != support.num_classes {
        return Err(FewshotError::DimensionMismatch(format!(
            "alpha is {rows}x{cols} but the support set has {} samples and {} classes",
            support.num_samples(),
            support.num_classes
        )));
    }
    Ok(ClassifierWeights {
        weights: duals.alpha.transpose() * &support.features,
    })
}

/// Class prototypes for nearest-class-mean scoring.
#[derive(Debug, Clone)]
pub struct Prototypes {
    /// `K x d`, row `k` is the mean embedding of class `k`.
    pub means: DMatrix<f64>,
    pub counts: Vec<usize>,
}

impl Prototypes {
    /// Scores `-(|q_i - c_k|^2) / d`, one row per query.
    pub fn scores(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>, FewshotError> {
        let d = self.means.ncols();
        if queries.ncols() != d {
            return Err(FewshotError::DimensionMismatch(format!(
                "queries have dim {} but prototypes have dim {d}",
                queries.ncols()
            )));
        }
        let k = self.means.nrows();
        let mut scores = DMatrix::zeros(queries.nrows(), k);
        for i in 0..queries.nrows() {
            for c in 0..k {
                let diff = queries.row(i) - self.means.row(c);
                scores[(i, c)] = -diff.norm_squared() / d as f64;
            }
        }
        Ok(scores)
    }

    /// Exact gradients of the distance scores: returns
    /// `(dL/d support features, dL/d query features)`. The prototype gradient
    /// scatters back as `1/count` per contributing support row because the
    /// mean is linear in its inputs.
    pub fn backward(
        &self,
        support: &SupportSet,
        queries: &DMatrix<f64>,
        dl_dscores: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), FewshotError> {
        let d = self.means.ncols();
        let k = self.means.nrows();
        if dl_dscores.shape() != (queries.nrows(), k) {
            return Err(FewshotError::DimensionMismatch(format!(
                "dl_dscores is {:?} but there are {} queries and {k} classes",
                dl_dscores.shape(),
                queries.nrows()
            )));
        }
        let mut dl_dqueries = DMatrix::zeros(queries.nrows(), d);
        let mut dl_dmeans: DMatrix<f64> = DMatrix::zeros(k, d);
        for i in 0..queries.nrows() {
            for c in 0..k {
                // score = -|q - m|^2 / d, so d(score)/dq = -2(q - m)/d.
                let coeff = 2.0 * dl_dscores[(i, c)] / d as f64;
                for col in 0..d {
                    let diff = queries[(i, col)] - self.means[(c, col)];
                    dl_dqueries[(i, col)] -= coeff * diff;
                    dl_dmeans[(c, col)] += coeff * diff;
                }
            }
        }
        let mut dl_dsupport = DMatrix::zeros(support.num_samples(), d);
        for n in 0..support.num_samples() {
            let y = support.labels[n];
            let inv_count = 1.0 / self.counts[y] as f64;
            for col in 0..d {
                dl_dsupport[(n, col)] += inv_count * dl_dmeans[(y, col)];
            }
        }
        Ok((dl_dsupport, dl_dqueries))
    }
}

/// Per-class mean prototypes; scores queries by negative squared distance
/// normalized by the feature dimension.
pub fn nearest_class_mean(support: &SupportSet) -> Result<Prototypes, FewshotError> {
    support.check()?;
    if let Some(class) = support.first_missing_class() {
        return Err(FewshotError::DegenerateClass { class });
    }
    let counts = support.class_counts();
    let mut means = DMatrix::zeros(support.num_classes, support.feature_dim());
    for n in 0..support.num_samples() {
        let y = support.labels[n];
        let inv_count = 1.0 / counts[y] as f64;
        for col in 0..support.feature_dim() {
            means[(y, col)] += inv_count * support.features[(n, col)];
        }
    }
    Ok(Prototypes { means, counts })
}

/// Everything a fitted learner needs for scoring and for the backward pass.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub kind: LearnerKind,
    pub weights: ClassifierWeights,
    /// Present for the QP learners only.
    pub duals: Option<DualVariables>,
    pub problem: Option<QpProblem>,
    pub solution: Option<QpSolution>,
    /// Present for the nearest-class-mean learner only.
    pub prototypes: Option<Prototypes>,
}

impl FitResult {
    /// Class scores for a batch of query embeddings (`n_q x K`): inner
    /// products against the classifier rows, or negative normalized squared
    /// distances for the prototype learner.
    pub fn scores(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>, FewshotError> {
        match (&self.prototypes, self.kind) {
            (Some(protos), LearnerKind::NearestClassMean) => protos.scores(queries),
            _ => {
                if queries.ncols() != self.weights.weights.ncols() {
                    return Err(FewshotError::DimensionMismatch(format!(
                        "queries have dim {} but weights have dim {}",
                        queries.ncols(),
                        self.weights.weights.ncols()
                    )));
                }
                Ok(queries * self.weights.weights.transpose())
            }
        }
    }
}

/// Fit the configured learner on one support set.
///
/// QP learners solve their dual with the configured iteration budget and keep
/// the problem and solution for the backward pass; the prototype learner
/// stores its means in the weight rows.
pub fn fit(
    support: &SupportSet,
    config: &LearnerConfig,
    solver: &SolverConfig,
) -> Result<FitResult, FewshotError> {
    config.validate()?;
    match config.kind {
        LearnerKind::NearestClassMean => {
            let prototypes = nearest_class_mean(support)?;
            Ok(FitResult {
                kind: config.kind,
                weights: ClassifierWeights {
                    weights: prototypes.means.clone(),
                },
                duals: None,
                problem: None,
                solution: None,
                prototypes: Some(prototypes),
            })
        }
        LearnerKind::SvmCs | LearnerKind::Ridge => {
            let problem = match config.kind {
                LearnerKind::SvmCs => svm_cs_dual_qp(support, config.svm_c)?,
                _ => ridge_dual_qp(support, config.ridge_lambda)?,
            };
            let solution = match config.qp_iteration_cap {
                Some(cap) => solve_capped(&problem, solver, cap)?,
                None => solve(&problem, solver)?,
            };
            let duals = DualVariables::from_stacked(
                &solution.z_star,
                support.num_samples(),
                support.num_classes,
            );
            let weights = dual_to_weights(&duals, support)?;
            Ok(FitResult {
                kind: config.kind,
                weights,
                duals: Some(duals),
                problem: Some(problem),
                solution: Some(solution),
                prototypes: None,
            })
        }
    }
}

/// Route a loss gradient on the classifier weights back to the support
/// features of a fitted QP learner.
///
/// Three terms chain together: the weight recovery `W = alpha' F` is linear
/// in `alpha`, giving `dL/dalpha = F (dL/dW)'`; the QP backward pass turns
/// that into a gradient on the dual's quadratic term `P`; and `P`'s Gram
/// blocks plus the explicit `F` in the recovery contribute
/// `2 (sum_k dP_k) F + alpha dL/dW`.
pub fn backward_to_support(
    fit_result: &FitResult,
    dl_dweights: &DMatrix<f64>,
    support: &SupportSet,
) -> Result<DMatrix<f64>, FewshotError> {
    let (problem, solution, duals) = match (&fit_result.problem, &fit_result.solution, &fit_result.duals)
    {
        (Some(p), Some(s), Some(d)) => (p, s, d),
        _ => return Err(FewshotError::Solver(QpError::StaleFactorization)),
    };
    let n_s = support.num_samples();
    let k = support.num_classes;
    let d = support.feature_dim();
    if dl_dweights.shape() != (k, d) {
        return Err(FewshotError::DimensionMismatch(format!(
            "dl_dweights is {:?} but weights are {k}x{d}",
            dl_dweights.shape()
        )));
    }

    let dl_dalpha = &support.features * dl_dweights.transpose();
    let dl_dz = DualVariables {
        alpha: dl_dalpha,
    }
    .stacked();
    let grads = backward(problem, solution, &dl_dz)?;

    // P holds one Gram block per class; Gram = F F' contributes 2 D F for the
    // summed (already symmetrized) block gradient D.
    let mut d_sum = DMatrix::zeros(n_s, n_s);
    for blk in 0..k {
        d_sum += grads.dp.view((blk * n_s, blk * n_s), (n_s, n_s));
    }
    Ok(2.0 * &d_sum * &support.features + &duals.alpha * dl_dweights)
}
