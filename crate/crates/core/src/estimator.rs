//! Per-response estimation: the modified quasi-likelihood maximiser, the
//! naive GLM maximum-likelihood baseline, and the two-fold sample split.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GhiveError, Result};
use crate::family::GlmFamily;
use crate::linalg::{self, serde_matrix, weighted_gram};
use crate::rng::{stream_rng, Stream};

/// Maximum number of step halvings in the backtracking line search.
/// Bound on `|x . f|` for Bernoulli quasi-likelihood iterates.
const QUASI_ETA_BOUND: f64 = 100.0;
const MAX_HALVINGS: usize = 30;

/// Observed covariates `x` (n x p) and responses `y` (n x M).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(GhiveError::Dimension(format!(
                "x has {} rows but y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() < 2 || x.ncols() < 1 || y.ncols() < 1 {
            return Err(GhiveError::InvalidInput(format!(
                "need n >= 2, p >= 1, M >= 1; got n={}, p={}, M={}",
                x.nrows(),
                x.ncols(),
                y.ncols()
            )));
        }
        for (name, mat) in [("x", &x), ("y", &y)] {
            if let Some(pos) = mat.iter().position(|v| !v.is_finite()) {
                let (row, col) = (pos % mat.nrows(), pos / mat.nrows());
                return Err(GhiveError::InvalidInput(format!("{name}[{row}, {col}] is not finite")));
            }
        }
        Ok(Dataset { x, y })
    }

    /// Rejects responses outside the support of `family`.
    pub fn validate_for(&self, family: GlmFamily) -> Result<()> {
        for m in 0..self.m() {
            for i in 0..self.n() {
                family
                    .check_response(self.y[(i, m)])
                    .map_err(|e| GhiveError::InvalidInput(format!("response row {i}, column {m}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.x, self.y)
    }

    /// Rows `rows` of both matrices, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.x.select_rows(rows), self.y.select_rows(rows))
    }

    /// Response column `m` as a contiguous slice.
    pub fn response(&self, m: usize) -> &[f64] {
        let n = self.n();
        &self.y.as_slice()[m * n..(m + 1) * n]
    }
}

/// Seeded two-fold partition of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub d1: Vec<usize>,
    pub d2: Vec<usize>,
}

impl SplitPlan {
    pub fn n(&self) -> usize {
        self.d1.len() + self.d2.len()
    }

    /// Fold label (1 or 2) for every observation.
    pub fn fold_labels(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.n()];
        for &i in &self.d1 {
            labels[i] = 1;
        }
        for &i in &self.d2 {
            labels[i] = 2;
        }
        labels
    }
}

/// Uniform random permutation of `0..n`; the first `ceil(n/2)` entries form
/// fold one. Indices inside each fold are stored in ascending order.
pub fn make_split(n: usize, seed: u64) -> Result<SplitPlan> {
    if n < 2 {
        return Err(GhiveError::InvalidInput(format!(
            "cannot split {n} observations into two folds"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(seed, Stream::Split));
    let mut d2 = perm.split_off(n.div_ceil(2));
    let mut d1 = perm;
    d1.sort_unstable();
    d2.sort_unstable();
    Ok(SplitPlan { seed, d1, d2 })
}

/// Coefficients for all responses (rows) with per-row convergence records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefMatrix {
    #[serde(with = "serde_matrix")]
    pub values: DMatrix<f64>,
    pub converged: Vec<bool>,
    pub grad_norm: Vec<f64>,
}

impl CoefMatrix {
    fn from_fits(fits: Vec<QmlFit>, p: usize) -> Self {
        let m = fits.len();
        let mut values = DMatrix::zeros(m, p);
        for (r, f) in fits.iter().enumerate() {
            values.set_row(r, &f.coef.transpose());
        }
        CoefMatrix {
            values,
            converged: fits.iter().map(|f| f.converged).collect(),
            grad_norm: fits.iter().map(|f| f.grad_norm).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, m: usize) -> DVector<f64> {
        self.values.row(m).transpose()
    }

    /// Entrywise mean of two fits; a row counts as converged only if both did.
    pub fn average(a: &CoefMatrix, b: &CoefMatrix) -> CoefMatrix {
        CoefMatrix {
            values: (&a.values + &b.values) * 0.5,
            converged: a.converged.iter().zip(&b.converged).map(|(x, y)| *x && *y).collect(),
            grad_norm: a.grad_norm.iter().zip(&b.grad_norm).map(|(x, y)| x.max(*y)).collect(),
        }
    }
}

/// Stopping rule for the Newton iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitControl {
    /// Sup-norm threshold on the gradient.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitControl {
    fn default() -> Self {
        FitControl {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Result of one single-response maximisation.
#[derive(Debug, Clone, PartialEq)]
pub struct QmlFit {
    pub coef: DVector<f64>,
    pub converged: bool,
    pub grad_norm: f64,
    /// Objective at `coef`.
    pub q_value: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting value first.
    pub q_path: Vec<f64>,
    /// Index of the start that produced this fit.
    pub start: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Objective {
    /// Modified quasi-likelihood.
    Quasi(GlmFamily),
    /// Ordinary canonical-link log-likelihood.
    Loglik(GlmFamily),
}

impl Objective {
    fn term(self, y: f64, eta: f64) -> f64 {
        match self {
            Objective::Quasi(f) => f.quasi_term(y, eta),
            Objective::Loglik(f) => f.loglik_term(y, eta),
        }
    }

    fn score(self, y: f64, eta: f64) -> f64 {
        match self {
            Objective::Quasi(f) => f.quasi_score(y, eta),
            Objective::Loglik(f) => f.loglik_score(y, eta),
        }
    }

    /// Negative second derivative of `term` in `eta`.
    pub(crate) fn curvature(self, y: f64, eta: f64) -> f64 {
        match self {
            Objective::Quasi(f) => f.hessian_weight(y, eta),
            Objective::Loglik(f) => f.variance(eta),
        }
    }
}

/// A single-response objective `(1/n) sum_i term(y_i, x_i . f)`.
pub(crate) struct Problem<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub objective: Objective,
}

impl Problem<'_> {
    fn n(&self) -> f64 {
        self.y.len() as f64
    }

    pub fn linear_predictor(&self, f: &DVector<f64>) -> DVector<f64> {
        self.x * f
    }

    pub fn value_at(&self, eta: &DVector<f64>) -> f64 {
        let total: f64 = self
            .y
            .iter()
            .zip(eta.iter())
            .map(|(&y, &e)| self.objective.term(y, e))
            .sum();
        let v = total / self.n();
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    pub fn value(&self, f: &DVector<f64>) -> f64 {
        self.value_at(&self.linear_predictor(f))
    }

    pub fn gradient_at(&self, eta: &DVector<f64>) -> DVector<f64> {
        let s = DVector::from_iterator(
            self.y.len(),
            self.y.iter().zip(eta.iter()).map(|(&y, &e)| self.objective.score(y, e)),
        );
        self.x.tr_mul(&s) / self.n()
    }

    pub fn gradient(&self, f: &DVector<f64>) -> DVector<f64> {
        self.gradient_at(&self.linear_predictor(f))
    }

    /// `-(Hessian)` = `(1/n) sum_i curvature_i x_i x_i^T`.
    pub fn neg_hessian_at(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        let w: Vec<f64> = self
            .y
            .iter()
            .zip(eta.iter())
            .map(|(&y, &e)| self.objective.curvature(y, e))
            .collect();
        weighted_gram(self.x, &w)
    }

    fn ascent_direction(&self, eta: &DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
        let mut h = self.neg_hessian_at(eta);
        if !h.iter().all(|v| v.is_finite()) {
            return grad.clone();
        }
        if let Some(d) = linalg::solve_spd(&h, grad) {
            return d;
        }
        let lo = linalg::min_eigenvalue(&h);
        let delta = 1e-8 * (1.0 + lo.abs());
        for i in 0..h.nrows() {
            h[(i, i)] += delta;
        }
        linalg::solve_spd(&h, grad).unwrap_or_else(|| grad.clone())
    }

    fn bernoulli(&self) -> bool {
        matches!(
            self.objective,
            Objective::Quasi(GlmFamily::Bernoulli) | Objective::Loglik(GlmFamily::Bernoulli)
        )
    }

    /// Under separation the Bernoulli quasi-likelihood has no maximiser and
    /// its Newton steps grow without bound, so iterates are kept inside
    /// `|eta| <= QUASI_ETA_BOUND`. A separated fit stalls at that boundary
    /// unconverged.
    fn admissible(&self, eta: &DVector<f64>) -> bool {
        !matches!(self.objective, Objective::Quasi(GlmFamily::Bernoulli))
            || eta.iter().all(|e| e.abs() <= QUASI_ETA_BOUND)
    }

    /// Largest step in `[0, 1]` along `dir` that stays admissible.
    fn initial_step(&self, eta: &DVector<f64>, dir: &DVector<f64>) -> f64 {
        if !matches!(self.objective, Objective::Quasi(GlmFamily::Bernoulli)) {
            return 1.0;
        }
        let d_eta = self.x * dir;
        let mut t = 1.0f64;
        for (&e, &d) in eta.iter().zip(d_eta.iter()) {
            if d != 0.0 {
                let limit = (QUASI_ETA_BOUND.copysign(d) - e) / d;
                t = t.min(0.999 * limit.max(0.0));
            }
        }
        t
    }

    /// Damped Newton ascent from one start.
    pub fn maximize(&self, start: &DVector<f64>, ctl: FitControl) -> QmlFit {
        let mut f = start.clone();
        let mut eta = self.linear_predictor(&f);
        let mut q = self.value_at(&eta);
        let mut grad = self.gradient_at(&eta);
        let mut gnorm = sup_norm(&grad);
        let mut q_path = vec![q];
        let mut iterations = 0;
        while gnorm >= ctl.tol && iterations < ctl.max_iter {
            let dir = self.ascent_direction(&eta, &grad);
            let mut step = self.initial_step(&eta, &dir);
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand = &f + &dir * step;
                let cand_eta = self.linear_predictor(&cand);
                if !self.admissible(&cand_eta) {
                    step *= 0.5;
                    continue;
                }
                let cand_q = self.value_at(&cand_eta);
                if cand_q > q {
                    accepted = Some((cand, cand_eta, cand_q, None));
                    break;
                }
                // Near the optimum the objective change drowns in rounding;
                // accept a step that is flat to within rounding but shrinks
                // the gradient.
                if cand_q >= q - 4.0 * f64::EPSILON * (1.0 + q.abs()) {
                    let cand_grad = self.gradient_at(&cand_eta);
                    if sup_norm(&cand_grad) < gnorm {
                        accepted = Some((cand, cand_eta, cand_q, Some(cand_grad)));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((cand, cand_eta, cand_q, cand_grad)) = accepted else {
                break;
            };
            f = cand;
            eta = cand_eta;
            q = cand_q;
            grad = cand_grad.unwrap_or_else(|| self.gradient_at(&eta));
            gnorm = sup_norm(&grad);
            q_path.push(q);
            iterations += 1;
        }
        QmlFit {
            coef: f,
            converged: gnorm < ctl.tol,
            grad_norm: gnorm,
            q_value: q,
            iterations,
            q_path,
            start: 0,
        }
    }
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    if v.iter().any(|x| x.is_nan()) {
        f64::INFINITY
    } else {
        v.amax()
    }
}

fn check_problem(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(GhiveError::Dimension(format!(
            "design has {} rows but response has {} entries",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() < x.ncols() {
        return Err(GhiveError::InvalidInput(format!(
            "{} rows cannot identify {} coefficients",
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Maximises the modified quasi-likelihood for one response from each of
/// `starts` and keeps the candidate with the largest final objective.
pub fn fit_qml_one(
    x: &DMatrix<f64>,
    y: &[f64],
    family: GlmFamily,
    starts: &[DVector<f64>],
    ctl: FitControl,
) -> Result<QmlFit> {
    check_problem(x, y)?;
    if starts.is_empty() {
        return Err(GhiveError::InvalidInput("no starting values supplied".into()));
    }
    if let Some(s) = starts.iter().find(|s| s.len() != x.ncols()) {
        return Err(GhiveError::Dimension(format!(
            "start has length {} but there are {} covariates",
            s.len(),
            x.ncols()
        )));
    }
    let problem = Problem {
        x,
        y,
        objective: Objective::Quasi(family),
    };
    let mut best: Option<QmlFit> = None;
    for (idx, start) in starts.iter().enumerate() {
        if !start.iter().all(|v| v.is_finite()) || !problem.admissible(&problem.linear_predictor(start)) {
            continue;
        }
        let mut fit = problem.maximize(start, ctl);
        fit.start = idx;
        if best.as_ref().is_none_or(|b| fit.q_value > b.q_value) {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| GhiveError::InvalidInput("no usable starting value (non-finite or in the logistic tail)".into()))
}

/// `(1/n) sum_i Q(y_i, x_i . f)` and its gradient in `f`.
pub fn quasi_objective(
    x: &DMatrix<f64>,
    y: &[f64],
    family: GlmFamily,
    f: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    objective(x, y, f, Objective::Quasi(family))
}

/// `(1/n) sum_i log p(y_i | x_i . f)` (up to terms free of `f`) and its gradient.
pub fn loglik_objective(
    x: &DMatrix<f64>,
    y: &[f64],
    family: GlmFamily,
    f: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    objective(x, y, f, Objective::Loglik(family))
}

fn objective(x: &DMatrix<f64>, y: &[f64], f: &DVector<f64>, objective: Objective) -> Result<(f64, DVector<f64>)> {
    if x.nrows() != y.len() || x.ncols() != f.len() {
        return Err(GhiveError::Dimension(format!(
            "x is {}x{}, y has {} entries, f has {}",
            x.nrows(),
            x.ncols(),
            y.len(),
            f.len()
        )));
    }
    let problem = Problem { x, y, objective };
    Ok((problem.value(f), problem.gradient(f)))
}

/// Canonical-link maximum likelihood for one response, started at zero.
pub fn fit_mle_one(x: &DMatrix<f64>, y: &[f64], family: GlmFamily, ctl: FitControl) -> Result<QmlFit> {
    check_problem(x, y)?;
    let problem = Problem {
        x,
        y,
        objective: Objective::Loglik(family),
    };
    let mut fit = problem.maximize(&DVector::zeros(x.ncols()), ctl);
    // A vanishing gradient in the tail is separation, not convergence.
    if problem.bernoulli()
        && problem
            .linear_predictor(&fit.coef)
            .iter()
            .any(|&e| GlmFamily::in_logistic_tail(e))
    {
        fit.converged = false;
    }
    Ok(fit)
}

/// Naive per-response GLM fit on all observations, ignoring hidden variables.
pub fn fit_naive_mle(data: &Dataset, family: GlmFamily, ctl: FitControl) -> Result<CoefMatrix> {
    let fits = (0..data.m())
        .into_par_iter()
        .map(|m| fit_mle_one(data.x(), data.response(m), family, ctl))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoefMatrix::from_fits(fits, data.p()))
}

/// Quasi-likelihood fits on each fold, plus their average.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitCoefs {
    pub f_d1: CoefMatrix,
    pub f_d2: CoefMatrix,
    pub f_avg: CoefMatrix,
}

fn fit_fold(
    data: &Dataset,
    rows: &[usize],
    fold: &'static str,
    family: GlmFamily,
    ctl: FitControl,
) -> Result<CoefMatrix> {
    if rows.len() < data.p() {
        return Err(GhiveError::FoldTooSmall {
            fold,
            rows: rows.len(),
            needed: data.p(),
        });
    }
    let (x, y) = data.select_rows(rows);
    let n = rows.len();
    let fits = (0..data.m())
        .into_par_iter()
        .map(|m| {
            let ym = &y.as_slice()[m * n..(m + 1) * n];
            let zero = DVector::zeros(data.p());
            let warm = fit_mle_one(&x, ym, family, ctl)?.coef;
            fit_qml_one(&x, ym, family, &[zero, warm], ctl)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoefMatrix::from_fits(fits, data.p()))
}

/// Fits every response on each fold independently, starting from zero and
/// from the naive MLE on the same fold.
pub fn fit_qml_all(data: &Dataset, family: GlmFamily, split: &SplitPlan, ctl: FitControl) -> Result<CrossFitCoefs> {
    if split.n() != data.n() {
        return Err(GhiveError::Dimension(format!(
            "split covers {} observations but the dataset has {}",
            split.n(),
            data.n()
        )));
    }
    let f_d1 = fit_fold(data, &split.d1, "D1", family, ctl)?;
    let f_d2 = fit_fold(data, &split.d2, "D2", family, ctl)?;
    let f_avg = CoefMatrix::average(&f_d1, &f_d2);
    Ok(CrossFitCoefs { f_d1, f_d2, f_avg })
}
