//! Deterministic regression engine.
//!
//! Every nuisance fit and every targeting step goes through
//! [`fit_weighted_logistic`]: Newton/IRLS on the weighted Bernoulli
//! log-likelihood with an offset, which also accepts fractional outcomes in
//! `[0, 1]`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::type1_quantile;

/// Score sup-norm tolerance, on the scale of the weighted mean.
pub const IRLS_TOL: f64 = 1e-10;
pub const IRLS_MAX_ITER: usize = 100;
/// Coefficients are clamped to `[-COEF_CAP, COEF_CAP]`.
pub const COEF_CAP: f64 = 30.0;
pub const DEFAULT_BOUND: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite input in {0}")]
    NonFiniteInput(&'static str),
    #[error("all weights are zero")]
    NoPositiveWeight,
    #[error("weighted normal equations are singular")]
    SingularSystem,
    #[error("outcome {0} outside [0, 1]")]
    OutcomeOutOfRange(f64),
    #[error("covariate pattern not seen when the basis was built")]
    UnseenLevel,
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn bound_prob(p: f64, bound: f64) -> f64 {
    p.clamp(bound, 1.0 - bound)
}

/// Clamps each probability into `[bound, 1 - bound]`.
pub fn bound_probability(p: &[f64], bound: f64) -> Vec<f64> {
    assert!(bound > 0.0 && bound < 0.5, "bound must lie in (0, 0.5)");
    p.iter().map(|&x| bound_prob(x, bound)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the weighted score divided by the total weight.
    pub final_gradient_norm: f64,
    /// At least one coefficient sits at the cap (separation).
    pub capped: bool,
}

impl LogisticFit {
    /// Linear predictor `offset + X β` for new rows.
    pub fn linear_predictor(&self, design: &DMatrix<f64>, offset: &[f64]) -> Vec<f64> {
        let beta = DVector::from_column_slice(&self.coefficients);
        let eta = design * beta;
        eta.iter().zip(offset).map(|(e, o)| e + o).collect()
    }

    pub fn predict(&self, design: &DMatrix<f64>, offset: &[f64]) -> Vec<f64> {
        self.linear_predictor(design, offset).into_iter().map(expit).collect()
    }
}

/// Weighted log-likelihood `Σ wᵢ [yᵢ log σ(ηᵢ) + (1 − yᵢ) log(1 − σ(ηᵢ))]`.
pub fn weighted_loglik(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    beta: &[f64],
) -> f64 {
    let eta = design * DVector::from_column_slice(beta);
    eta.iter()
        .zip(y)
        .zip(weights.iter().zip(offset))
        .map(|((&e, &yi), (&wi, &oi))| {
            let e = e + oi;
            if wi == 0.0 {
                0.0
            } else {
                -wi * (yi * softplus(-e) + (1.0 - yi) * softplus(e))
            }
        })
        .sum()
}

/// Analytic gradient of [`weighted_loglik`]: `Xᵀ W (y − σ(η))`.
pub fn weighted_score(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let eta = design * DVector::from_column_slice(beta);
    let r = DVector::from_iterator(
        y.len(),
        eta.iter()
            .zip(y)
            .zip(weights.iter().zip(offset))
            .map(|((&e, &yi), (&wi, &oi))| if wi == 0.0 { 0.0 } else { wi * (yi - expit(e + oi)) }),
    );
    design.tr_mul(&r).iter().copied().collect()
}

fn check_inputs(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
) -> Result<(), RegressError> {
    let n = design.nrows();
    if y.len() != n || weights.len() != n || offset.len() != n {
        return Err(RegressError::DimensionMismatch(format!(
            "design has {n} rows, y {} weights {} offset {}",
            y.len(),
            weights.len(),
            offset.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(RegressError::NonFiniteInput("weights"));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(RegressError::NoPositiveWeight);
    }
    for i in 0..n {
        if weights[i] == 0.0 {
            continue;
        }
        if !y[i].is_finite() {
            return Err(RegressError::NonFiniteInput("outcome"));
        }
        if !(0.0..=1.0).contains(&y[i]) {
            return Err(RegressError::OutcomeOutOfRange(y[i]));
        }
        if !offset[i].is_finite() {
            return Err(RegressError::NonFiniteInput("offset"));
        }
        if design.row(i).iter().any(|x| !x.is_finite()) {
            return Err(RegressError::NonFiniteInput("design"));
        }
    }
    Ok(())
}

/// Keeps only rows with positive weight.
fn compress(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
) -> (DMatrix<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let keep: Vec<usize> = (0..design.nrows()).filter(|&i| weights[i] > 0.0).collect();
    if keep.len() == design.nrows() {
        return (design.clone(), y.to_vec(), weights.to_vec(), offset.to_vec());
    }
    let x = design.select_rows(keep.iter());
    let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
    (x, pick(y), pick(weights), pick(offset))
}

/// `Xᵀ diag(d) X`.
fn weighted_gram(x: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let mut xd = x.clone();
    for mut col in xd.column_iter_mut() {
        for (v, &di) in col.iter_mut().zip(d) {
            *v *= di;
        }
    }
    x.tr_mul(&xd)
}

/// Maximizes the weighted Bernoulli log-likelihood with offset by IRLS.
///
/// Supports fractional outcomes. Coefficients are clamped to `±COEF_CAP`;
/// a fit stuck at the cap is returned with `capped = true, converged = false`.
pub fn fit_weighted_logistic(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    start: &[f64],
) -> Result<LogisticFit, RegressError> {
    fit_weighted_logistic_with(design, y, weights, offset, start, IRLS_TOL, IRLS_MAX_ITER)
}

pub fn fit_weighted_logistic_with(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    start: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<LogisticFit, RegressError> {
    check_inputs(design, y, weights, offset)?;
    let p = design.ncols();
    if start.len() != p {
        return Err(RegressError::DimensionMismatch(format!(
            "start has {} entries, design has {p} columns",
            start.len()
        )));
    }
    if start.iter().any(|b| !b.is_finite()) {
        return Err(RegressError::NonFiniteInput("start"));
    }
    let (x, y, w, off) = compress(design, y, weights, offset);
    let total_w: f64 = w.iter().sum();

    // rank check on the weighted Gram matrix at unit variance
    let gram = weighted_gram(&x, &w);
    if independent_gram_columns(&gram).len() < p {
        return Err(RegressError::SingularSystem);
    }

    let mut beta: Vec<f64> = start.iter().map(|b| b.clamp(-COEF_CAP, COEF_CAP)).collect();
    let mut ll = weighted_loglik(&x, &y, &w, &off, &beta);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut capped = false;

    while iterations < max_iter {
        let eta = &x * DVector::from_column_slice(&beta);
        let mu: Vec<f64> = eta.iter().zip(&off).map(|(e, o)| expit(e + o)).collect();
        let resid = DVector::from_iterator(mu.len(), (0..mu.len()).map(|i| w[i] * (y[i] - mu[i])));
        let score = x.tr_mul(&resid);
        grad_norm = score.amax() / total_w;
        let at_cap: Vec<bool> = beta.iter().map(|b| b.abs() >= COEF_CAP).collect();
        // a coefficient at the cap whose score still points outward is frozen
        let frozen: Vec<bool> = (0..p)
            .map(|j| at_cap[j] && score[j].signum() == beta[j].signum() && score[j] != 0.0)
            .collect();
        let free_norm = (0..p)
            .filter(|&j| !frozen[j])
            .map(|j| score[j].abs())
            .fold(0.0, f64::max)
            / total_w;
        capped = frozen.iter().any(|&f| f);
        if grad_norm <= tol || (capped && free_norm <= tol) {
            break;
        }
        iterations += 1;
        let d: Vec<f64> = mu.iter().zip(&w).map(|(m, wi)| wi * m * (1.0 - m)).collect();
        let info = weighted_gram(&x, &d);
        let free: Vec<usize> = (0..p).filter(|&j| !frozen[j]).collect();
        let info_free = info.select_rows(free.iter()).select_columns(free.iter());
        let score_free = DVector::from_iterator(free.len(), free.iter().map(|&j| score[j]));
        let step = match Cholesky::new(info_free) {
            Some(ch) => ch.solve(&score_free),
            None if capped || beta.iter().any(|b| b.abs() > 0.5 * COEF_CAP) => {
                capped = true;
                break;
            }
            None => return Err(RegressError::SingularSystem),
        };
        if step.iter().any(|s| !s.is_finite()) {
            if capped || beta.iter().any(|b| b.abs() > 0.5 * COEF_CAP) {
                capped = true;
                break;
            }
            return Err(RegressError::SingularSystem);
        }
        // step halving on the log-likelihood
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand = beta.clone();
            for (k, &j) in free.iter().enumerate() {
                cand[j] = (beta[j] + scale * step[k]).clamp(-COEF_CAP, COEF_CAP);
            }
            let cand_ll = weighted_loglik(&x, &y, &w, &off, &cand);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                let moved = cand.iter().zip(&beta).any(|(a, b)| a != b);
                beta = cand;
                ll = cand_ll;
                accepted = moved;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // no representable improvement: we are at the optimum to machine precision
            let eta = &x * DVector::from_column_slice(&beta);
            let resid = DVector::from_iterator(
                y.len(),
                (0..y.len()).map(|i| w[i] * (y[i] - expit(eta[i] + off[i]))),
            );
            grad_norm = x.tr_mul(&resid).amax() / total_w;
            capped = beta.iter().any(|b| b.abs() >= COEF_CAP);
            break;
        }
    }
    if iterations == max_iter {
        let eta = &x * DVector::from_column_slice(&beta);
        let resid = DVector::from_iterator(
            y.len(),
            (0..y.len()).map(|i| w[i] * (y[i] - expit(eta[i] + off[i]))),
        );
        grad_norm = x.tr_mul(&resid).amax() / total_w;
    }
    capped = capped || beta.iter().any(|b| b.abs() >= COEF_CAP);
    Ok(LogisticFit {
        coefficients: beta,
        converged: !capped && grad_norm <= tol,
        iterations,
        final_gradient_norm: grad_norm,
        capped,
    })
}

/// One-parameter logistic fluctuation `expit(offset + ε·covariate)` fit by MLE,
/// started at `ε = 0`.
pub fn fit_fluctuation(
    covariate: &[f64],
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
) -> Result<LogisticFit, RegressError> {
    let x = DMatrix::from_column_slice(covariate.len(), 1, covariate);
    fit_weighted_logistic_with(&x, y, weights, offset, &[0.0], 1e-13, IRLS_MAX_ITER)
}

/// Weighted least squares `argmin Σ wᵢ (yᵢ − xᵢᵀβ)²`.
pub fn fit_weighted_linear(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
) -> Result<Vec<f64>, RegressError> {
    let n = design.nrows();
    if y.len() != n || weights.len() != n {
        return Err(RegressError::DimensionMismatch("linear regression inputs".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(RegressError::NonFiniteInput("weights"));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(RegressError::NoPositiveWeight);
    }
    if (0..n).any(|i| weights[i] > 0.0 && !y[i].is_finite()) {
        return Err(RegressError::NonFiniteInput("outcome"));
    }
    let gram = weighted_gram(design, weights);
    let wy = DVector::from_iterator(n, (0..n).map(|i| if weights[i] > 0.0 { weights[i] * y[i] } else { 0.0 }));
    let rhs = design.tr_mul(&wy);
    if independent_gram_columns(&gram).len() < design.ncols() {
        return Err(RegressError::SingularSystem);
    }
    let ch = Cholesky::new(gram).ok_or(RegressError::SingularSystem)?;
    Ok(ch.solve(&rhs).iter().copied().collect())
}

/// Greedy pivot-free rank revealing pass over a Gram matrix: column `j` is
/// kept when its residual after projecting on the kept columns retains more
/// than `1e-9` of its squared norm.
fn independent_gram_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let p = gram.ncols();
    let mut kept: Vec<usize> = Vec::new();
    // rows of L for kept columns
    let mut l: Vec<Vec<f64>> = Vec::new();
    for j in 0..p {
        let gjj = gram[(j, j)];
        if !(gjj > 0.0) {
            continue;
        }
        let mut z = vec![0.0; kept.len()];
        for a in 0..kept.len() {
            let mut s = gram[(kept[a], j)];
            for b in 0..a {
                s -= l[a][b] * z[b];
            }
            z[a] = s / l[a][a];
        }
        let resid = gjj - z.iter().map(|v| v * v).sum::<f64>();
        if resid > 1e-9 * gjj {
            let mut row = z;
            row.push(resid.sqrt());
            l.push(row);
            kept.push(j);
        }
    }
    kept
}

/// Indices of a maximal linearly independent set of design columns under the
/// given row weights, in column order.
pub fn independent_columns(design: &DMatrix<f64>, weights: &[f64]) -> Vec<usize> {
    independent_gram_columns(&weighted_gram(design, weights))
}

/// Truncated-power spline basis over a fixed set of covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: Vec<Vec<f64>>,
    degree: u32,
    include_interactions: bool,
}

impl SplineBasis {
    pub fn new(knots: Vec<Vec<f64>>, degree: u32, include_interactions: bool) -> Result<Self, RegressError> {
        for k in &knots {
            if k.iter().any(|x| !x.is_finite()) {
                return Err(RegressError::NonFiniteInput("knots"));
            }
            if k.windows(2).any(|p| p[1] <= p[0]) {
                return Err(RegressError::DimensionMismatch("knots must be strictly increasing".into()));
            }
        }
        Ok(SplineBasis { knots, degree, include_interactions })
    }

    /// Knots at the given empirical quantiles of each covariate, keeping only
    /// those strictly inside the observed range.
    pub fn at_quantiles<R: AsRef<[f64]>>(
        rows: &[R],
        dim: usize,
        probs: &[f64],
        degree: u32,
        include_interactions: bool,
    ) -> Self {
        let knots = (0..dim)
            .map(|j| {
                let mut col: Vec<f64> = rows.iter().map(|r| r.as_ref()[j]).collect();
                col.sort_by(f64::total_cmp);
                if col.is_empty() {
                    return Vec::new();
                }
                let (lo, hi) = (col[0], col[col.len() - 1]);
                let mut k: Vec<f64> = probs.iter().map(|&p| type1_quantile(&col, p)).collect();
                k.sort_by(f64::total_cmp);
                k.dedup();
                k.retain(|&x| x > lo && x < hi);
                k
            })
            .collect();
        SplineBasis { knots, degree, include_interactions }
    }

    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    pub fn knots(&self) -> &[Vec<f64>] {
        &self.knots
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn n_columns(&self) -> usize {
        let d = self.knots.len();
        let per: usize = self.knots.iter().map(|k| self.degree as usize + k.len()).sum();
        1 + per + if self.include_interactions { d * (d.saturating_sub(1)) / 2 } else { 0 }
    }
}

/// `[1 | per-covariate powers and truncated powers | pairwise products]`.
pub fn spline_design<R: AsRef<[f64]>>(rows: &[R], basis: &SplineBasis) -> Result<DMatrix<f64>, RegressError> {
    let d = basis.dim();
    let p = basis.n_columns();
    let mut m = DMatrix::zeros(rows.len(), p);
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != d {
            return Err(RegressError::DimensionMismatch(format!(
                "row has {} covariates, basis expects {d}",
                r.len()
            )));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(RegressError::NonFiniteInput("covariates"));
        }
        let mut c = 0;
        m[(i, c)] = 1.0;
        c += 1;
        for (j, &x) in r.iter().enumerate() {
            for pow in 1..=basis.degree {
                m[(i, c)] = x.powi(pow as i32);
                c += 1;
            }
            for &k in &basis.knots[j] {
                m[(i, c)] = if basis.degree == 0 {
                    if x >= k { 1.0 } else { 0.0 }
                } else {
                    (x - k).max(0.0).powi(basis.degree as i32)
                };
                c += 1;
            }
        }
        if basis.include_interactions {
            for a in 0..d {
                for b in (a + 1)..d {
                    m[(i, c)] = r[a] * r[b];
                    c += 1;
                }
            }
        }
    }
    Ok(m)
}

/// How to build a regression basis from training covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    InterceptOnly,
    Spline { degree: u32, knot_probs: Vec<f64>, interactions: bool },
    /// One indicator per distinct covariate pattern seen in training.
    Saturated,
}

impl Default for BasisSpec {
    /// Linear truncated-power spline with knots at the quintiles, no interactions.
    fn default() -> Self {
        BasisSpec::Spline { degree: 1, knot_probs: vec![0.2, 0.4, 0.6, 0.8], interactions: false }
    }
}

impl BasisSpec {
    pub fn build<R: AsRef<[f64]>>(&self, train: &[R], dim: usize) -> Basis {
        match self {
            BasisSpec::InterceptOnly => Basis::Intercept,
            BasisSpec::Spline { degree, knot_probs, interactions } => {
                Basis::Spline(SplineBasis::at_quantiles(train, dim, knot_probs, *degree, *interactions))
            }
            BasisSpec::Saturated => {
                let mut levels: Vec<Vec<f64>> = train.iter().map(|r| r.as_ref().to_vec()).collect();
                levels.sort_by(|a, b| {
                    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
                });
                levels.dedup();
                Basis::Saturated(levels)
            }
        }
    }
}

/// A concrete basis with fixed knots or levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Basis {
    Intercept,
    Spline(SplineBasis),
    Saturated(Vec<Vec<f64>>),
}

impl Basis {
    pub fn design<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<DMatrix<f64>, RegressError> {
        match self {
            Basis::Intercept => Ok(DMatrix::from_element(rows.len(), 1, 1.0)),
            Basis::Spline(b) => spline_design(rows, b),
            Basis::Saturated(levels) => {
                let mut m = DMatrix::zeros(rows.len(), levels.len());
                for (i, r) in rows.iter().enumerate() {
                    let r = r.as_ref();
                    let j = levels.iter().position(|l| l.as_slice() == r).ok_or(RegressError::UnseenLevel)?;
                    m[(i, j)] = 1.0;
                }
                Ok(m)
            }
        }
    }
}

/// Logistic regression on a basis: drops columns that are linearly dependent
/// on the training rows, then fits by IRLS.
#[derive(Debug, Clone)]
pub struct BasisLogistic {
    pub basis: Basis,
    pub columns: Vec<usize>,
    pub fit: LogisticFit,
}

impl BasisLogistic {
    /// Fits `y ~ basis(rows)` on rows with positive weight, zero offset.
    pub fn fit<R: AsRef<[f64]>>(
        spec: &BasisSpec,
        rows: &[R],
        dim: usize,
        y: &[f64],
        weights: &[f64],
    ) -> Result<Self, RegressError> {
        let train: Vec<&[f64]> =
            rows.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(r, _)| r.as_ref()).collect();
        if train.is_empty() {
            return Err(RegressError::NoPositiveWeight);
        }
        let basis = spec.build(&train, dim);
        let full = basis.design(rows)?;
        let columns = independent_columns(&full, weights);
        let x = full.select_columns(columns.iter());
        let offset = vec![0.0; rows.len()];
        let start = vec![0.0; columns.len()];
        let fit = fit_weighted_logistic(&x, y, weights, &offset, &start)?;
        Ok(BasisLogistic { basis, columns, fit })
    }

    pub fn predict<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>, RegressError> {
        let x = self.basis.design(rows)?.select_columns(self.columns.iter());
        Ok(self.fit.predict(&x, &vec![0.0; rows.len()]))
    }
}

/// Weighted least squares on a basis, with the same column pruning as [`BasisLogistic`].
#[derive(Debug, Clone)]
pub struct BasisLinear {
    pub basis: Basis,
    pub columns: Vec<usize>,
    pub coefficients: Vec<f64>,
}

impl BasisLinear {
    pub fn fit<R: AsRef<[f64]>>(
        spec: &BasisSpec,
        rows: &[R],
        dim: usize,
        y: &[f64],
        weights: &[f64],
    ) -> Result<Self, RegressError> {
        let train: Vec<&[f64]> =
            rows.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(r, _)| r.as_ref()).collect();
        if train.is_empty() {
            return Err(RegressError::NoPositiveWeight);
        }
        let basis = spec.build(&train, dim);
        let full = basis.design(rows)?;
        let columns = independent_columns(&full, weights);
        let x = full.select_columns(columns.iter());
        let coefficients = fit_weighted_linear(&x, y, weights)?;
        Ok(BasisLinear { basis, columns, coefficients })
    }

    pub fn predict<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>, RegressError> {
        let x = self.basis.design(rows)?.select_columns(self.columns.iter());
        Ok((x * DVector::from_column_slice(&self.coefficients)).iter().copied().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intercept(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn intercept_only_balanced_is_zero() {
        let y = [1.0, 0.0, 1.0, 0.0];
        let fit = fit_weighted_logistic(&intercept(4), &y, &[1.0; 4], &[0.0; 4], &[0.0]).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-14);
    }

    #[test]
    fn intercept_only_is_logit_of_mean() {
        let y = [1.0, 1.0, 1.0, 0.0];
        let fit = fit_weighted_logistic(&intercept(4), &y, &[1.0; 4], &[0.0; 4], &[0.0]).unwrap();
        assert!((fit.coefficients[0] - 0.75f64.ln() + 0.25f64.ln()).abs() < 1e-10);
        assert!((fit.coefficients[0] - 1.098612).abs() < 1e-6);
    }

    /// Root of the one-dimensional fluctuation score by bisection.
    fn bisect_score(cov: &[f64], y: &[f64], w: &[f64], off: &[f64]) -> f64 {
        let score = |e: f64| -> f64 {
            (0..y.len()).map(|i| w[i] * cov[i] * (y[i] - expit(off[i] + e * cov[i]))).sum()
        };
        let (mut lo, mut hi) = (-20.0, 20.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn indicator_fluctuation_matches_bisection() {
        let a = [0.1, 0.5, 0.9, 1.3, 1.7, 2.1, 0.3, 1.1];
        let y = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let q = [0.3, 0.4, 0.5, 0.6, 0.45, 0.55, 0.35, 0.5];
        let v = 1.0;
        let cov: Vec<f64> = a.iter().map(|&x| if x >= v { 1.0 } else { 0.0 }).collect();
        let off: Vec<f64> = q.iter().map(|&p| logit(p)).collect();
        let w = [2.0, 1.5, 3.0, 1.2, 2.2, 1.7, 1.1, 2.5];
        let fit = fit_fluctuation(&cov, &y, &w, &off).unwrap();
        let oracle = bisect_score(&cov, &y, &w, &off);
        assert!((fit.coefficients[0] - oracle).abs() < 1e-9, "{} vs {oracle}", fit.coefficients[0]);
    }

    #[test]
    fn separation_is_capped_not_fatal() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let y = [0.0, 0.0, 1.0, 1.0];
        let fit = fit_weighted_logistic(&x, &y, &[1.0; 4], &[0.0; 4], &[0.0, 0.0]).unwrap();
        assert!(fit.capped);
        assert!(!fit.converged);
        assert!(fit.coefficients.iter().all(|b| b.is_finite() && b.abs() <= COEF_CAP));
    }

    #[test]
    fn rank_deficient_design_is_singular() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let err = fit_weighted_logistic(&x, &[0.0, 1.0, 1.0], &[1.0; 3], &[0.0; 3], &[0.0, 0.0]);
        assert_eq!(err.unwrap_err(), RegressError::SingularSystem);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let err = fit_weighted_logistic(&intercept(2), &[0.0, 1.0], &[1.0, f64::NAN], &[0.0; 2], &[0.0]);
        assert_eq!(err.unwrap_err(), RegressError::NonFiniteInput("weights"));
        let err = fit_weighted_logistic(&intercept(2), &[0.0, 1.0], &[1.0; 2], &[0.0, f64::INFINITY], &[0.0]);
        assert_eq!(err.unwrap_err(), RegressError::NonFiniteInput("offset"));
    }

    #[test]
    fn zero_weight_rows_are_ignored() {
        let y = [1.0, 0.0, 1.0, 0.5];
        let fit = fit_weighted_logistic(&intercept(4), &y, &[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, f64::NAN, 0.0], &[0.0])
            .unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
    }

    #[test]
    fn bound_probability_clamps() {
        assert_eq!(bound_probability(&[0.001, 0.5, 0.9999], 0.005), vec![0.005, 0.5, 0.995]);
    }

    #[test]
    fn spline_rows() {
        let b = SplineBasis::new(vec![vec![0.5]], 1, false).unwrap();
        let m = spline_design(&[[0.0], [0.8]], &b).unwrap();
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
        let r1: Vec<f64> = m.row(1).iter().copied().collect();
        assert_eq!(r1[..2], [1.0, 0.8]);
        assert!((r1[2] - 0.3).abs() < 1e-15);

        let b0 = SplineBasis::new(vec![vec![1.0, 2.0]], 0, false).unwrap();
        let m = spline_design(&[[0.5], [1.5], [2.5]], &b0).unwrap();
        assert_eq!(m.column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 1.0]);
        assert_eq!(m.column(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn spline_interactions_and_errors() {
        let b = SplineBasis::new(vec![vec![], vec![]], 1, true).unwrap();
        let m = spline_design(&[[2.0, 3.0]], &b).unwrap();
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 6.0]);
        assert!(spline_design(&[[f64::NAN, 1.0]], &b).is_err());
        assert!(SplineBasis::new(vec![vec![1.0, 1.0]], 1, false).is_err());
    }

    #[test]
    fn quantile_knots_stay_inside_range() {
        let rows: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, (i % 2) as f64]).collect();
        let b = SplineBasis::at_quantiles(&rows, 2, &[0.2, 0.4, 0.6, 0.8], 1, false);
        assert_eq!(b.knots()[0], vec![1.0, 3.0, 5.0, 7.0]);
        assert!(b.knots()[1].is_empty());
    }

    #[test]
    fn weighted_linear_recovers_line() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let beta = fit_weighted_linear(&x, &[1.0, 3.0, 5.0, 7.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-12 && (beta[1] - 2.0).abs() < 1e-12);
    }

    fn problem() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        (20usize..60).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(-1.5f64..1.5, n * 2),
                proptest::collection::vec(0.0f64..1.0, n),
                proptest::collection::vec(0.2f64..3.0, n),
                proptest::collection::vec(-0.5f64..0.5, n),
            )
        })
    }

    fn design_of(n: usize, cov: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { cov[2 * i + j - 1] })
    }

    proptest! {
        #[test]
        fn score_vanishes_after_convergence((n, cov, y, w, off) in problem()) {
            let x = design_of(n, &cov);
            let fit = fit_weighted_logistic(&x, &y, &w, &off, &[0.0; 3]).unwrap();
            prop_assume!(!fit.capped);
            prop_assert!(fit.converged);
            let s = weighted_score(&x, &y, &w, &off, &fit.coefficients);
            prop_assert!(s.iter().all(|v| v.abs() <= 1e-8 * n as f64));
        }

        #[test]
        fn gradient_matches_finite_differences((n, cov, y, w, off) in problem(), b in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let x = design_of(n, &cov);
            let g = weighted_score(&x, &y, &w, &off, &b);
            let h = 1e-6;
            for j in 0..3 {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp[j] += h;
                bm[j] -= h;
                let fd = (weighted_loglik(&x, &y, &w, &off, &bp) - weighted_loglik(&x, &y, &w, &off, &bm)) / (2.0 * h);
                let rel = (fd - g[j]).abs() / g[j].abs().max(1.0);
                prop_assert!(rel < 1e-4, "j={} fd={} g={}", j, fd, g[j]);
            }
        }

        #[test]
        fn weight_scaling_leaves_coefficients((n, cov, y, w, off) in problem(), c in 0.1f64..20.0) {
            let x = design_of(n, &cov);
            let f1 = fit_weighted_logistic(&x, &y, &w, &off, &[0.0; 3]).unwrap();
            let w2: Vec<f64> = w.iter().map(|v| v * c).collect();
            let f2 = fit_weighted_logistic(&x, &y, &w2, &off, &[0.0; 3]).unwrap();
            prop_assume!(!f1.capped);
            for (a, b) in f1.coefficients.iter().zip(&f2.coefficients) {
                prop_assert!((a - b).abs() < 1e-7);
            }
        }

        #[test]
        fn spline_design_is_bit_identical(xs in proptest::collection::vec(-3.0f64..3.0, 1..30)) {
            let rows: Vec<[f64; 1]> = xs.iter().map(|&x| [x]).collect();
            let b = SplineBasis::at_quantiles(&rows, 1, &[0.25, 0.5, 0.75], 2, false);
            let m1 = spline_design(&rows, &b).unwrap();
            let m2 = spline_design(&rows, &b).unwrap();
            prop_assert!(m1.iter().zip(m2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
