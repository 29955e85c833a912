//! Nuisance-function estimation: `g_v(W) = P(A ≥ v | W)`, `Q(A, W) = E[Y | A, W, Δ = 1]`,
//! `Q_v(W) = E[Q(A, W) | A ≥ v, W]`, `G(A, W) = P(Δ = 1 | A, W)`,
//! `G_v(W) = P(Δ = 1 | A ≥ v, W)` and inverse-probability sampling weights.
//!
//! Every fit is a weighted logistic regression on a [`BasisSpec`]; every
//! returned probability is clamped to `[bound, 1 - bound]`. Degenerate fits
//! (constant pseudo-outcome, separation) are flagged rather than fatal.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, ThresholdGrid};
use crate::regress::{
    bound_prob, expit, fit_fluctuation, logit, BasisLinear, BasisLogistic, BasisSpec, RegressError,
    DEFAULT_BOUND,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NuisanceError {
    #[error("no measured observation with an observed outcome")]
    NoCompleteCases,
    #[error("no measured observation with a >= {0}")]
    EmptyStratum(f64),
    #[error("sampling stratum (delta={delta}, delta_y={delta_y}) has no measured member")]
    EmptyCellNoSample { delta: u8, delta_y: f64 },
    #[error("regression failed: {0}")]
    Regress(#[from] RegressError),
    #[error("input length {found} does not match n = {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// Every relevant biomarker on one side of the threshold.
    AllSameSide,
    /// Constant outcome among the fitting rows; a constant was returned.
    DegenerateOutcome,
    /// Separation: some coefficient hit the cap.
    Capped,
    NotConverged,
}

/// Predictions at every observation plus any flags raised while fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fitted {
    pub values: Vec<f64>,
    pub flags: Vec<FitFlag>,
}

impl Fitted {
    fn constant(n: usize, value: f64, bound: f64, flag: FitFlag) -> Self {
        Fitted { values: vec![bound_prob(value, bound); n], flags: vec![flag] }
    }

    fn from_model(model: &BasisLogistic, predictions: Vec<f64>, bound: f64) -> Self {
        let mut flags = Vec::new();
        if model.fit.capped {
            flags.push(FitFlag::Capped);
        } else if !model.fit.converged {
            flags.push(FitFlag::NotConverged);
        }
        Fitted { values: predictions.into_iter().map(|p| bound_prob(p, bound)).collect(), flags }
    }
}

/// Per-nuisance basis choices and the probability bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    pub gv: BasisSpec,
    pub q: BasisSpec,
    pub qv: BasisSpec,
    pub miss: BasisSpec,
    /// Basis on `(W, Δ, ΔY)` for the weight-targeting pseudo-outcome regression.
    pub h: BasisSpec,
    pub bound: f64,
    /// Fit `g_v` once across the grid with `v` as a regressor.
    pub pooled_gv: bool,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        NuisanceSpec {
            gv: BasisSpec::default(),
            q: BasisSpec::default(),
            qv: BasisSpec::default(),
            miss: BasisSpec::default(),
            h: BasisSpec::default(),
            bound: DEFAULT_BOUND,
            pooled_gv: false,
        }
    }
}

impl NuisanceSpec {
    pub fn with_all(basis: BasisSpec) -> Self {
        NuisanceSpec {
            gv: basis.clone(),
            q: basis.clone(),
            qv: basis.clone(),
            miss: basis.clone(),
            h: basis,
            ..Default::default()
        }
    }
}

fn w_rows(data: &Dataset) -> Vec<Vec<f64>> {
    data.iter().map(|o| o.w.clone()).collect()
}

/// `(a, w)` rows; unmeasured rows carry `a = 0` and are never given positive weight.
fn aw_rows(data: &Dataset) -> Vec<Vec<f64>> {
    data.iter()
        .map(|o| {
            let mut r = Vec::with_capacity(o.w.len() + 1);
            r.push(o.a.unwrap_or(0.0));
            r.extend_from_slice(&o.w);
            r
        })
        .collect()
}

fn check_len(data: &Dataset, v: &[f64]) -> Result<(), NuisanceError> {
    if v.len() != data.n() {
        return Err(NuisanceError::LengthMismatch { expected: data.n(), found: v.len() });
    }
    Ok(())
}

/// Weighted mean of `y` over rows with positive weight, plus whether `y` is constant there.
fn weighted_summary(y: &[f64], w: &[f64]) -> (f64, bool) {
    let mut sw = 0.0;
    let mut swy = 0.0;
    let mut first: Option<f64> = None;
    let mut constant = true;
    for (&yi, &wi) in y.iter().zip(w) {
        if wi > 0.0 {
            sw += wi;
            swy += wi * yi;
            match first {
                None => first = Some(yi),
                Some(f) if f != yi => constant = false,
                _ => {}
            }
        }
    }
    (swy / sw, constant)
}

#[allow(clippy::too_many_arguments)]
fn logistic_or_constant(
    spec: &BasisSpec,
    rows: &[Vec<f64>],
    dim: usize,
    y: &[f64],
    fit_w: &[f64],
    needed: &[bool],
    bound: f64,
    constant_flag: FitFlag,
) -> Result<Fitted, NuisanceError> {
    let (mean, constant) = weighted_summary(y, fit_w);
    if constant {
        return Ok(Fitted::constant(rows.len(), mean, bound, constant_flag));
    }
    let model = BasisLogistic::fit(spec, rows, dim, y, fit_w)?;
    let pred = predict_needed(&model, rows, needed)?;
    Ok(Fitted::from_model(&model, pred, bound))
}

/// Predicts at rows flagged as needed; other rows (never weighted downstream)
/// get the placeholder 0.5, so saturated bases need not cover them.
fn predict_needed(model: &BasisLogistic, rows: &[Vec<f64>], needed: &[bool]) -> Result<Vec<f64>, RegressError> {
    if needed.iter().all(|&b| b) {
        return model.predict(rows);
    }
    let sub: Vec<&Vec<f64>> = rows.iter().zip(needed).filter(|(_, &b)| b).map(|(r, _)| r).collect();
    let mut it = model.predict(&sub)?.into_iter();
    Ok(needed.iter().map(|&b| if b { it.next().unwrap_or(0.5) } else { 0.5 }).collect())
}

fn needed(weights: &[f64]) -> Vec<bool> {
    weights.iter().map(|&w| w > 0.0).collect()
}

fn needed_measured(data: &Dataset, weights: &[f64]) -> Vec<bool> {
    data.iter().zip(weights).map(|(o, &w)| w > 0.0 && o.measured()).collect()
}

/// `g_v(W)`: logistic regression of `1(a ≥ v)` on `basis(W)` among measured rows.
pub fn fit_gv(
    data: &Dataset,
    v: f64,
    basis: &BasisSpec,
    weights: &[f64],
    bound: f64,
) -> Result<Fitted, NuisanceError> {
    check_len(data, weights)?;
    let fit_w: Vec<f64> =
        data.iter().zip(weights).map(|(o, &w)| if o.measured() { w } else { 0.0 }).collect();
    if !fit_w.iter().any(|&w| w > 0.0) {
        return Err(NuisanceError::EmptyStratum(v));
    }
    let y: Vec<f64> = data.iter().map(|o| if o.above(v) { 1.0 } else { 0.0 }).collect();
    logistic_or_constant(basis, &w_rows(data), data.dim(), &y, &fit_w, &needed(weights), bound, FitFlag::AllSameSide)
}

/// `Q(A, W)`: logistic regression of `y` on `basis(A, W)` among measured, observed rows.
pub fn fit_q(
    data: &Dataset,
    basis: &BasisSpec,
    weights: &[f64],
    bound: f64,
) -> Result<Fitted, NuisanceError> {
    check_len(data, weights)?;
    let fit_w: Vec<f64> = data
        .iter()
        .zip(weights)
        .map(|(o, &w)| if o.measured() && o.observed() { w } else { 0.0 })
        .collect();
    if !fit_w.iter().any(|&w| w > 0.0) {
        return Err(NuisanceError::NoCompleteCases);
    }
    let y: Vec<f64> = data.iter().map(|o| o.delta_y()).collect();
    logistic_or_constant(basis, &aw_rows(data), data.dim() + 1, &y, &fit_w, &needed_measured(data, weights), bound, FitFlag::DegenerateOutcome)
}

/// `Q_v(W)` by sequential regression: fractional logistic regression of
/// `q_star` on `basis(W)` among measured rows with `a ≥ v`.
pub fn fit_qv_sequential(
    data: &Dataset,
    v: f64,
    q_star: &[f64],
    basis: &BasisSpec,
    weights: &[f64],
    bound: f64,
) -> Result<Fitted, NuisanceError> {
    check_len(data, weights)?;
    check_len(data, q_star)?;
    let fit_w: Vec<f64> = data.iter().zip(weights).map(|(o, &w)| if o.above(v) { w } else { 0.0 }).collect();
    if !fit_w.iter().any(|&w| w > 0.0) {
        return Err(NuisanceError::EmptyStratum(v));
    }
    logistic_or_constant(basis, &w_rows(data), data.dim(), q_star, &fit_w, &needed(weights), bound, FitFlag::DegenerateOutcome)
}

/// `E[Y | A ≥ v, W, Δ = 1]` fit directly on the outcome (the binTMLE initial estimate).
pub fn fit_qv_direct(
    data: &Dataset,
    v: f64,
    basis: &BasisSpec,
    weights: &[f64],
    bound: f64,
) -> Result<Fitted, NuisanceError> {
    check_len(data, weights)?;
    let fit_w: Vec<f64> = data
        .iter()
        .zip(weights)
        .map(|(o, &w)| if o.above(v) && o.observed() { w } else { 0.0 })
        .collect();
    if !fit_w.iter().any(|&w| w > 0.0) {
        return Err(NuisanceError::EmptyStratum(v));
    }
    let y: Vec<f64> = data.iter().map(|o| o.delta_y()).collect();
    logistic_or_constant(basis, &w_rows(data), data.dim(), &y, &fit_w, &needed(weights), bound, FitFlag::DegenerateOutcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingnessMode {
    /// `G(A, W) = P(Δ = 1 | A, W)` among measured rows.
    ConditionalOnA,
    /// `G_v(W) = P(Δ = 1 | A ≥ v, W)` among measured rows with `a ≥ v`.
    AboveThreshold,
}

pub fn fit_missingness(
    data: &Dataset,
    v: f64,
    mode: MissingnessMode,
    basis: &BasisSpec,
    weights: &[f64],
    bound: f64,
) -> Result<Fitted, NuisanceError> {
    check_len(data, weights)?;
    let delta: Vec<f64> = data.iter().map(|o| if o.observed() { 1.0 } else { 0.0 }).collect();
    match mode {
        MissingnessMode::ConditionalOnA => {
            let fit_w: Vec<f64> =
                data.iter().zip(weights).map(|(o, &w)| if o.measured() { w } else { 0.0 }).collect();
            if !fit_w.iter().any(|&w| w > 0.0) {
                return Err(NuisanceError::EmptyStratum(v));
            }
            logistic_or_constant(basis, &aw_rows(data), data.dim() + 1, &delta, &fit_w, &needed_measured(data, weights), bound, FitFlag::DegenerateOutcome)
        }
        MissingnessMode::AboveThreshold => {
            let fit_w: Vec<f64> =
                data.iter().zip(weights).map(|(o, &w)| if o.above(v) { w } else { 0.0 }).collect();
            if !fit_w.iter().any(|&w| w > 0.0) {
                return Err(NuisanceError::EmptyStratum(v));
            }
            logistic_or_constant(basis, &w_rows(data), data.dim(), &delta, &fit_w, &needed(weights), bound, FitFlag::DegenerateOutcome)
        }
    }
}

/// `g_v` for every threshold of the grid from one stacked regression of
/// `1(a ≥ v_j)` on `basis(W, v_j)`.
pub fn fit_gv_pooled(
    data: &Dataset,
    grid: &ThresholdGrid,
    basis: &BasisSpec,
    weights: &[f64],
    bound: f64,
) -> Result<Vec<Fitted>, NuisanceError> {
    check_len(data, weights)?;
    let n = data.n();
    let k = grid.len();
    let mut rows = Vec::with_capacity(n * k);
    let mut y = Vec::with_capacity(n * k);
    let mut fit_w = Vec::with_capacity(n * k);
    for &v in grid.values() {
        for (o, &w) in data.iter().zip(weights) {
            let mut r = o.w.clone();
            r.push(v);
            rows.push(r);
            y.push(if o.above(v) { 1.0 } else { 0.0 });
            fit_w.push(if o.measured() { w } else { 0.0 });
        }
    }
    let stacked = logistic_or_constant(basis, &rows, data.dim() + 1, &y, &fit_w, &needed(weights), bound, FitFlag::AllSameSide)?;
    Ok((0..k)
        .map(|j| Fitted { values: stacked.values[j * n..(j + 1) * n].to_vec(), flags: stacked.flags.clone() })
        .collect())
}

/// Inverse-probability sampling weights `w = 1 / P(R = 1 | ·)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeights {
    pub w: Vec<f64>,
    pub targeted: bool,
    /// Estimate of `E[D_v | R = 1, W, Δ, ΔY]`, present once targeted.
    pub h: Option<Vec<f64>>,
    /// Score `Σ (Rᵢ − πᵢ) Hᵢ / πᵢ` after targeting, divided by `n`.
    pub score: Option<f64>,
}

impl SamplingWeights {
    pub fn unit(n: usize) -> Self {
        SamplingWeights { w: vec![1.0; n], targeted: false, h: None, score: None }
    }

    /// Uses the dataset's external weight column as `1 / P(R = 1 | ·)`.
    pub fn from_external(data: &Dataset) -> Self {
        SamplingWeights { w: data.iter().map(|o| o.weight).collect(), targeted: false, h: None, score: None }
    }

    /// `Rᵢ wᵢ` for each observation.
    pub fn analysis_weights(&self, data: &Dataset) -> Vec<f64> {
        data.iter().zip(&self.w).map(|(o, &w)| if o.measured() { w } else { 0.0 }).collect()
    }
}

/// Stratified empirical `P(R = 1 | Δ, ΔY)`, inverted.
pub fn fit_sampling_weights(data: &Dataset) -> Result<SamplingWeights, NuisanceError> {
    let key = |o: &crate::dataset::Observation| (o.observed() as u8, o.delta_y().to_bits());
    let mut counts: BTreeMap<(u8, u64), (usize, usize)> = BTreeMap::new();
    for o in data.iter() {
        let e = counts.entry(key(o)).or_default();
        e.0 += 1;
        if o.measured() {
            e.1 += 1;
        }
    }
    if let Some((&(delta, bits), _)) = counts.iter().find(|(_, &(_, m))| m == 0) {
        return Err(NuisanceError::EmptyCellNoSample { delta, delta_y: f64::from_bits(bits) });
    }
    let w = data
        .iter()
        .map(|o| {
            let (total, measured) = counts[&key(o)];
            total as f64 / measured as f64
        })
        .collect();
    Ok(SamplingWeights { w, targeted: false, h: None, score: None })
}

/// Rows `(W, Δ, ΔY)` for the weight-targeting regression.
fn wdy_rows(data: &Dataset) -> Vec<Vec<f64>> {
    data.iter()
        .map(|o| {
            let mut r = o.w.clone();
            r.push(if o.observed() { 1.0 } else { 0.0 });
            r.push(o.delta_y());
            r
        })
        .collect()
}

const WEIGHT_TARGET_MAX_ROUNDS: usize = 50;

/// Targets the inclusion probabilities `π = 1/w` along
/// `logit π_ε = logit π + ε H / π`, iterating until `Σ (Rᵢ − πᵢ) Hᵢ / πᵢ ≈ 0`
/// with the updated `π` in the covariate.
///
/// `d_init` holds initial influence-function values for measured rows; `H`
/// is their least-squares regression on `basis(W, Δ, ΔY)` among measured rows.
/// Rows whose stratum is sampled with certainty (`π = 1`) stay fixed.
pub fn target_sampling_weights(
    data: &Dataset,
    weights: &SamplingWeights,
    d_init: &[f64],
    basis: &BasisSpec,
    bound: f64,
) -> Result<SamplingWeights, NuisanceError> {
    check_len(data, d_init)?;
    check_len(data, &weights.w)?;
    let n = data.n();
    let rows = wdy_rows(data);
    let fit_w: Vec<f64> = data.iter().map(|o| if o.measured() { 1.0 } else { 0.0 }).collect();
    let d: Vec<f64> = d_init.iter().zip(&fit_w).map(|(&x, &w)| if w > 0.0 { x } else { 0.0 }).collect();
    let h = if d.iter().all(|&x| x == 0.0) {
        vec![0.0; n]
    } else {
        let model = BasisLinear::fit(basis, &rows, data.dim() + 2, &d, &fit_w)?;
        model.predict(&rows)?
    };
    let r: Vec<f64> = data.iter().map(|o| if o.measured() { 1.0 } else { 0.0 }).collect();
    let certain: Vec<bool> = weights.w.iter().map(|&w| 1.0 / w >= 1.0 - 1e-12).collect();
    let mut pi: Vec<f64> = weights
        .w
        .iter()
        .zip(&certain)
        .map(|(&w, &c)| if c { 1.0 } else { bound_prob(1.0 / w, bound) })
        .collect();
    let score_of = |pi: &[f64]| -> f64 {
        (0..n).filter(|&i| !certain[i]).map(|i| (r[i] - pi[i]) * h[i] / pi[i]).sum::<f64>()
    };
    let fl_w: Vec<f64> = certain.iter().map(|&c| if c { 0.0 } else { 1.0 }).collect();
    if fl_w.iter().any(|&w| w > 0.0) && h.iter().any(|&x| x != 0.0) {
        for _ in 0..WEIGHT_TARGET_MAX_ROUNDS {
            let score = score_of(&pi);
            if score.abs() <= 1e-12 * n as f64 {
                break;
            }
            let cov: Vec<f64> = (0..n).map(|i| if certain[i] { 0.0 } else { h[i] / pi[i] }).collect();
            let offset: Vec<f64> = pi.iter().map(|&p| if p < 1.0 { logit(p) } else { 0.0 }).collect();
            let fit = fit_fluctuation(&cov, &r, &fl_w, &offset)?;
            let eps = fit.coefficients[0];
            for i in 0..n {
                if !certain[i] {
                    pi[i] = bound_prob(expit(offset[i] + eps * cov[i]), bound);
                }
            }
            if eps.abs() < 1e-15 {
                break;
            }
        }
    }
    let score = score_of(&pi) / n as f64;
    Ok(SamplingWeights { w: pi.iter().map(|p| 1.0 / p).collect(), targeted: true, h: Some(h), score: Some(score) })
}

/// Nuisance evaluations for one threshold. Entries of `A`-dependent functions
/// at unmeasured rows are placeholders and never enter a weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFits {
    pub threshold: f64,
    pub gv: Vec<f64>,
    pub q: Vec<f64>,
    /// `E[Y | A ≥ v, W, Δ = 1]` fit directly on `Y` (binTMLE initial fit).
    pub qv: Vec<f64>,
    pub g_miss: Vec<f64>,
    pub gv_miss: Vec<f64>,
    pub flags: Vec<(String, FitFlag)>,
}

/// Fits `Q` and `G` once and the threshold-specific functions for every grid point.
pub fn fit_grid(
    data: &Dataset,
    grid: &ThresholdGrid,
    spec: &NuisanceSpec,
    weights: &[f64],
) -> Result<Vec<NuisanceFits>, NuisanceError> {
    let q = fit_q(data, &spec.q, weights, spec.bound)?;
    let g_miss = fit_missingness(data, f64::NEG_INFINITY, MissingnessMode::ConditionalOnA, &spec.miss, weights, spec.bound)?;
    let pooled = if spec.pooled_gv { Some(fit_gv_pooled(data, grid, &spec.gv, weights, spec.bound)?) } else { None };
    grid.values()
        .par_iter()
        .enumerate()
        .map(|(j, &v)| {
            let gv = match &pooled {
                Some(p) => p[j].clone(),
                None => fit_gv(data, v, &spec.gv, weights, spec.bound)?,
            };
            let qv = fit_qv_direct(data, v, &spec.qv, weights, spec.bound)?;
            let gv_miss = fit_missingness(data, v, MissingnessMode::AboveThreshold, &spec.miss, weights, spec.bound)?;
            let mut flags = Vec::new();
            for (name, f) in [("gv", &gv), ("q", &q), ("qv", &qv), ("g_miss", &g_miss), ("gv_miss", &gv_miss)] {
                flags.extend(f.flags.iter().map(|&fl| (name.to_string(), fl)));
            }
            Ok(NuisanceFits {
                threshold: v,
                gv: gv.values,
                q: q.values.clone(),
                qv: qv.values,
                g_miss: g_miss.values.clone(),
                gv_miss: gv_miss.values,
                flags,
            })
        })
        .collect()
}

/// Diagnostic dump, one row per observation and threshold.
pub fn write_nuisance_csv<W: Write>(fits: &[NuisanceFits], writer: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "#schema=1")?;
    writeln!(w, "row,threshold,gv,q,qv,g_miss,gv_miss")?;
    for f in fits {
        for i in 0..f.gv.len() {
            writeln!(w, "{},{},{},{},{},{},{}", i, f.threshold, f.gv[i], f.q[i], f.qv[i], f.g_miss[i], f.gv_miss[i])?;
        }
    }
    w.flush()
}
