//! Estimators of `ψ_v = E_W E[Y | A ≥ v, W]`: the unadjusted Donovan ratio,
//! the dichotomized-biomarker TMLE (binTMLE), the sequential-regression TMLE
//! (srTMLE) and its inverse-probability-weighted variant.
//!
//! Every estimator returns the point estimate together with per-observation
//! influence values; `se = sqrt(mean(eif²) / n)`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DataError, Dataset, OutcomeKind};
use crate::nuisance::{
    fit_qv_sequential, target_sampling_weights, NuisanceError, NuisanceFits, NuisanceSpec, SamplingWeights,
};
use crate::regress::{expit, fit_fluctuation, logit, RegressError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("no measured observation with an observed outcome at or above threshold {0}")]
    EmptyStratum(f64),
    #[error("targeting diverged at threshold {threshold} ({stage} fluctuation hit the coefficient cap)")]
    TargetingDiverged { threshold: f64, stage: &'static str },
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error("input length {found} does not match n = {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    Donovan,
    BinTmle,
    SrTmle,
    IpwSrTmle,
}

impl EstimatorTag {
    pub const ALL: [EstimatorTag; 4] =
        [EstimatorTag::Donovan, EstimatorTag::BinTmle, EstimatorTag::SrTmle, EstimatorTag::IpwSrTmle];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorTag::Donovan => "donovan",
            EstimatorTag::BinTmle => "bin_tmle",
            EstimatorTag::SrTmle => "sr_tmle",
            EstimatorTag::IpwSrTmle => "ipw_sr_tmle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl std::fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Residual of the `Q` fluctuation score, `(1/n) Σ wᵢ Δᵢ 1(aᵢ≥v)/(g_v G) (yᵢ − Q*)`.
    pub score_q: Option<f64>,
    /// Residual of the `Q_v` fluctuation score, `(1/n) Σ wᵢ 1(aᵢ≥v)/g_v (Q* − Q_v*)`.
    pub score_qv: Option<f64>,
    pub epsilon: Vec<f64>,
    /// No events (or no non-events) among observed outcomes above `v`: the
    /// estimate is a point mass and the influence values vanish.
    pub degenerate: bool,
    pub eif_mean: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub threshold: f64,
    pub psi: f64,
    pub eif: Vec<f64>,
    pub se: f64,
    pub tag: EstimatorTag,
    pub outcome_range: (f64, f64),
    pub diagnostics: Diagnostics,
}

impl ThresholdEstimate {
    fn finish(threshold: f64, psi: f64, eif: Vec<f64>, tag: EstimatorTag, mut diagnostics: Diagnostics) -> Self {
        let n = eif.len() as f64;
        diagnostics.eif_mean = eif.iter().sum::<f64>() / n;
        let se = (eif.iter().map(|e| e * e).sum::<f64>() / n / n).sqrt();
        ThresholdEstimate { threshold, psi, eif, se, tag, outcome_range: (0.0, 1.0), diagnostics }
    }

    fn point_mass(threshold: f64, psi: f64, n: usize, tag: EstimatorTag) -> Self {
        let d = Diagnostics { degenerate: true, flags: vec!["degenerate_outcome_above_threshold".into()], ..Default::default() };
        ThresholdEstimate::finish(threshold, psi, vec![0.0; n], tag, d)
    }
}

fn check_len(data: &Dataset, v: &[f64]) -> Result<(), EstimatorError> {
    if v.len() != data.n() {
        return Err(EstimatorError::LengthMismatch { expected: data.n(), found: v.len() });
    }
    Ok(())
}

/// Observed outcomes above `v` with positive weight. Errors if there are none;
/// returns `Some(c)` when they all equal a boundary value `c ∈ {0, 1}`.
fn observed_above(data: &Dataset, v: f64, weights: &[f64]) -> Result<Option<f64>, EstimatorError> {
    let mut ys = data.iter().zip(weights).filter(|(o, &w)| w > 0.0 && o.above(v) && o.observed()).map(|(o, _)| o.delta_y());
    let first = ys.next().ok_or(EstimatorError::EmptyStratum(v))?;
    if (first == 0.0 || first == 1.0) && ys.all(|y| y == first) {
        Ok(Some(first))
    } else {
        Ok(None)
    }
}

/// Efficient influence function of `ψ_v` at one observation.
#[allow(clippy::too_many_arguments)]
pub fn eif_adjusted(above: bool, observed: bool, y: f64, gv: f64, q_star: f64, qv_star: f64, g_miss: f64, psi: f64) -> f64 {
    let mut d = qv_star - psi;
    if above {
        d += (q_star - qv_star) / gv;
        if observed {
            d += (y - q_star) / (gv * g_miss);
        }
    }
    d
}

/// Unadjusted ratio `Σ w Δ 1(a≥v) y / Σ w Δ 1(a≥v)`.
pub fn donovan(data: &Dataset, v: f64, weights: &[f64]) -> Result<ThresholdEstimate, EstimatorError> {
    check_len(data, weights)?;
    let (mut sw, mut s_above, mut s_obs, mut s_y) = (0.0, 0.0, 0.0, 0.0);
    for (o, &w) in data.iter().zip(weights) {
        if !o.measured() || w <= 0.0 {
            continue;
        }
        sw += w;
        if o.above(v) {
            s_above += w;
            if o.observed() {
                s_obs += w;
                s_y += w * o.delta_y();
            }
        }
    }
    if s_obs <= 0.0 {
        return Err(EstimatorError::EmptyStratum(v));
    }
    let psi = s_y / s_obs;
    let g = s_above / sw;
    let g_obs = s_obs / s_above;
    let n = data.n() as f64;
    // Weights are normalized so that the influence values have the scale of one observation.
    let scale = n / sw;
    let eif = data
        .iter()
        .zip(weights)
        .map(|(o, &w)| {
            if o.measured() && w > 0.0 && o.above(v) && o.observed() {
                scale * w * (o.delta_y() - psi) / (g * g_obs)
            } else {
                0.0
            }
        })
        .collect();
    Ok(ThresholdEstimate::finish(v, psi, eif, EstimatorTag::Donovan, Diagnostics::default()))
}

fn flags_of(fits: &NuisanceFits) -> Vec<String> {
    fits.flags.iter().map(|(name, f)| format!("{name}:{}", serde_json::to_string(f).unwrap_or_default().trim_matches('"'))).collect()
}

/// Sequential-regression TMLE.
///
/// 1. Fluctuate `Q` along `logit Q + ε 1(a≥v)` with weights `w Δ / (g_v G)`.
/// 2. Regress `Q*` on `W` among `a ≥ v` to get `Q_v`.
/// 3. Fluctuate `Q_v` along `logit Q_v + ε` with weights `w 1(a≥v) / g_v`, outcome `Q*`.
/// 4. `ψ = Σ w Q_v* / Σ w`.
pub fn sr_tmle(
    data: &Dataset,
    v: f64,
    fits: &NuisanceFits,
    weights: &[f64],
    spec: &NuisanceSpec,
) -> Result<ThresholdEstimate, EstimatorError> {
    sr_tmle_tagged(data, v, fits, weights, spec, EstimatorTag::SrTmle)
}

fn sr_tmle_tagged(
    data: &Dataset,
    v: f64,
    fits: &NuisanceFits,
    weights: &[f64],
    spec: &NuisanceSpec,
    tag: EstimatorTag,
) -> Result<ThresholdEstimate, EstimatorError> {
    check_len(data, weights)?;
    let n = data.n();
    if let Some(c) = observed_above(data, v, weights)? {
        return Ok(ThresholdEstimate::point_mass(v, c, n, tag));
    }
    let above: Vec<f64> = data.iter().map(|o| if o.above(v) { 1.0 } else { 0.0 }).collect();
    let y: Vec<f64> = data.iter().map(|o| o.delta_y()).collect();

    let w1: Vec<f64> = (0..n)
        .map(|i| {
            let o = &data.observations()[i];
            if o.measured() && o.observed() { weights[i] / (fits.gv[i] * fits.g_miss[i]) } else { 0.0 }
        })
        .collect();
    let off1: Vec<f64> = fits.q.iter().map(|&q| logit(q)).collect();
    let fit1 = fit_fluctuation(&above, &y, &w1, &off1)?;
    if fit1.capped {
        return Err(EstimatorError::TargetingDiverged { threshold: v, stage: "outcome" });
    }
    let eps1 = fit1.coefficients[0];
    let q_star: Vec<f64> = (0..n).map(|i| expit(off1[i] + eps1 * above[i])).collect();

    let qv = fit_qv_sequential(data, v, &q_star, &spec.qv, weights, spec.bound)?;
    let w2: Vec<f64> = (0..n).map(|i| if above[i] > 0.0 { weights[i] / fits.gv[i] } else { 0.0 }).collect();
    let off2: Vec<f64> = qv.values.iter().map(|&q| logit(q)).collect();
    let ones = vec![1.0; n];
    let fit2 = fit_fluctuation(&ones, &q_star, &w2, &off2)?;
    if fit2.capped {
        return Err(EstimatorError::TargetingDiverged { threshold: v, stage: "threshold-mean" });
    }
    let eps2 = fit2.coefficients[0];
    let qv_star: Vec<f64> = off2.iter().map(|&o| expit(o + eps2)).collect();

    let sw: f64 = weights.iter().sum();
    let psi = (0..n).map(|i| weights[i] * qv_star[i]).sum::<f64>() / sw;
    let nf = n as f64;
    let score_q = (0..n).map(|i| w1[i] * above[i] * (y[i] - q_star[i])).sum::<f64>() / nf;
    let score_qv = (0..n).map(|i| w2[i] * (q_star[i] - qv_star[i])).sum::<f64>() / nf;
    let scale = nf / sw;
    let eif = (0..n)
        .map(|i| {
            if weights[i] <= 0.0 {
                return 0.0;
            }
            let o = &data.observations()[i];
            let d = eif_adjusted(o.above(v), o.observed(), y[i], fits.gv[i], q_star[i], qv_star[i], fits.g_miss[i], psi);
            scale * weights[i] * d
        })
        .collect();
    let mut flags = flags_of(fits);
    flags.extend(qv.flags.iter().map(|f| format!("qv_refit:{f:?}")));
    let diagnostics = Diagnostics {
        score_q: Some(score_q),
        score_qv: Some(score_qv),
        epsilon: vec![eps1, eps2],
        flags,
        ..Default::default()
    };
    Ok(ThresholdEstimate::finish(v, psi, eif, tag, diagnostics))
}

/// TMLE of the treatment-specific mean of the dichotomized biomarker `1(a≥v)`,
/// with an intercept fluctuation of the direct `E[Y | A≥v, W, Δ=1]` fit.
pub fn bin_tmle(
    data: &Dataset,
    v: f64,
    fits: &NuisanceFits,
    weights: &[f64],
) -> Result<ThresholdEstimate, EstimatorError> {
    check_len(data, weights)?;
    let n = data.n();
    if let Some(c) = observed_above(data, v, weights)? {
        return Ok(ThresholdEstimate::point_mass(v, c, n, EstimatorTag::BinTmle));
    }
    let y: Vec<f64> = data.iter().map(|o| o.delta_y()).collect();
    let h: Vec<f64> = (0..n)
        .map(|i| {
            let o = &data.observations()[i];
            if o.above(v) && o.observed() { 1.0 / (fits.gv_miss[i] * fits.gv[i]) } else { 0.0 }
        })
        .collect();
    let wf: Vec<f64> = (0..n).map(|i| weights[i] * h[i]).collect();
    let off: Vec<f64> = fits.qv.iter().map(|&q| logit(q)).collect();
    let fit = fit_fluctuation(&vec![1.0; n], &y, &wf, &off)?;
    if fit.capped {
        return Err(EstimatorError::TargetingDiverged { threshold: v, stage: "threshold-mean" });
    }
    let eps = fit.coefficients[0];
    let qv_star: Vec<f64> = off.iter().map(|&o| expit(o + eps)).collect();
    let sw: f64 = weights.iter().sum();
    let psi = (0..n).map(|i| weights[i] * qv_star[i]).sum::<f64>() / sw;
    let nf = n as f64;
    let score = (0..n).map(|i| wf[i] * (y[i] - qv_star[i])).sum::<f64>() / nf;
    let scale = nf / sw;
    let eif = (0..n)
        .map(|i| {
            if weights[i] <= 0.0 {
                0.0
            } else {
                scale * weights[i] * (h[i] * (y[i] - qv_star[i]) + qv_star[i] - psi)
            }
        })
        .collect();
    let diagnostics =
        Diagnostics { score_qv: Some(score), epsilon: vec![eps], flags: flags_of(fits), ..Default::default() };
    Ok(ThresholdEstimate::finish(v, psi, eif, EstimatorTag::BinTmle, diagnostics))
}

/// srTMLE with inverse-probability sampling weights `R·w`.
///
/// With `target_weights`, the inclusion probabilities are first targeted
/// toward the pseudo-outcome `E[D | R=1, W, Δ, ΔY]` and the influence function
/// is `R w D − (R w − 1) H`; otherwise it is `R w D`.
pub fn ipw_sr_tmle(
    data: &Dataset,
    v: f64,
    fits: &NuisanceFits,
    sw: &SamplingWeights,
    target_weights: bool,
    spec: &NuisanceSpec,
) -> Result<ThresholdEstimate, EstimatorError> {
    check_len(data, &sw.w)?;
    let initial = sr_tmle_tagged(data, v, fits, &sw.analysis_weights(data), spec, EstimatorTag::IpwSrTmle)?;
    if !target_weights || initial.diagnostics.degenerate {
        return Ok(initial);
    }
    let n = data.n();
    // Per-observation D recovered from R w D (zero for unmeasured rows).
    let scale0 = n as f64 / sw.analysis_weights(data).iter().sum::<f64>();
    let d0: Vec<f64> = (0..n)
        .map(|i| if data.observations()[i].measured() { initial.eif[i] / (scale0 * sw.w[i]) } else { 0.0 })
        .collect();
    let targeted = target_sampling_weights(data, sw, &d0, &spec.h, spec.bound)?;
    let rw = targeted.analysis_weights(data);
    let est = sr_tmle_tagged(data, v, fits, &rw, spec, EstimatorTag::IpwSrTmle)?;
    let h = targeted.h.as_deref().unwrap_or(&[]);
    let eif: Vec<f64> =
        (0..n).map(|i| est.eif[i] - (rw[i] - 1.0) * h.get(i).copied().unwrap_or(0.0)).collect();
    let mut diagnostics = est.diagnostics.clone();
    diagnostics.flags.push(format!("weight_score:{:e}", targeted.score.unwrap_or(0.0)));
    Ok(ThresholdEstimate::finish(v, est.psi, eif, EstimatorTag::IpwSrTmle, diagnostics))
}

/// Affine map of a bounded outcome onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTransform {
    pub lo: f64,
    pub hi: f64,
}

impl OutcomeTransform {
    pub fn new(lo: f64, hi: f64) -> Result<Self, DataError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(DataError::InvalidGrid(format!("outcome range [{lo}, {hi}] is empty")));
        }
        Ok(OutcomeTransform { lo, hi })
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.lo) / (self.hi - self.lo)
    }

    pub fn back(&self, p: f64) -> f64 {
        self.lo + (self.hi - self.lo) * p
    }
}

pub fn scale_outcome(data: &Dataset, t: OutcomeTransform) -> Result<Dataset, DataError> {
    let mut ys = Vec::with_capacity(data.n());
    for (row, o) in data.iter().enumerate() {
        match o.y {
            Some(y) if !(t.lo..=t.hi).contains(&y) => {
                return Err(DataError::OutOfRangeOutcome { row: row + 1, value: y, lo: t.lo, hi: t.hi });
            }
            y => ys.push(y.map(|y| t.forward(y))),
        }
    }
    Ok(data.with_outcomes(ys, OutcomeKind::BoundedContinuous { lo: 0.0, hi: 1.0 }))
}

/// Restores the original outcome scale: `ψ ↦ lo + (hi − lo) ψ`, `se ↦ (hi − lo) se`.
pub fn unscale_estimate(est: &ThresholdEstimate, t: OutcomeTransform) -> ThresholdEstimate {
    let s = t.hi - t.lo;
    ThresholdEstimate {
        psi: t.back(est.psi),
        se: s * est.se,
        eif: est.eif.iter().map(|e| s * e).collect(),
        outcome_range: (t.lo, t.hi),
        ..est.clone()
    }
}

/// `threshold,psi,se,tag` rows under a `#schema=1` header.
pub fn write_estimates_csv<W: Write>(estimates: &[ThresholdEstimate], writer: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "#schema=1")?;
    writeln!(w, "threshold,psi,se,tag")?;
    for e in estimates {
        writeln!(w, "{},{},{},{}", e.threshold, e.psi, e.se, e.tag)?;
    }
    w.flush()
}

/// JSON without the per-observation influence vectors.
pub fn estimates_json(estimates: &[ThresholdEstimate]) -> serde_json::Value {
    serde_json::Value::Array(
        estimates
            .iter()
            .map(|e| {
                serde_json::json!({
                    "threshold": e.threshold,
                    "psi": e.psi,
                    "se": e.se,
                    "tag": e.tag,
                    "outcome_range": [e.outcome_range.0, e.outcome_range.1],
                    "diagnostics": e.diagnostics,
                })
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Observation;
    use crate::nuisance::fit_grid;
    use crate::regress::BasisSpec;
    use crate::ThresholdGrid;

    fn ds(a: &[f64], y: &[Option<f64>]) -> Dataset {
        let obs = a.iter().zip(y).map(|(&a, &y)| Observation::new(vec![], Some(a), y)).collect();
        Dataset::new(obs, vec![], OutcomeKind::Binary).unwrap()
    }

    #[test]
    fn donovan_hand_ratios() {
        let d = ds(&[1.0, 2.0, 3.0], &[Some(1.0), Some(0.0), Some(0.0)]);
        assert_eq!(donovan(&d, 1.5, &[1.0; 3]).unwrap().psi, 0.0);
        let d = ds(&[1.0, 2.0], &[Some(1.0), Some(0.0)]);
        assert_eq!(donovan(&d, 0.0, &[1.0; 2]).unwrap().psi, 0.5);
        let d = ds(&[1.0, 2.0, 3.0, 4.0], &[Some(1.0), Some(1.0), Some(0.0), None]);
        let e = donovan(&d, 1.5, &[1.0; 4]).unwrap();
        assert_eq!(e.psi, 0.5);
        assert!(e.eif.iter().sum::<f64>().abs() < 1e-12);
        assert_eq!(donovan(&d, 10.0, &[1.0; 4]), Err(EstimatorError::EmptyStratum(10.0)));
    }

    #[test]
    fn eif_special_cases() {
        assert_eq!(eif_adjusted(true, true, 0.3, 0.4, 0.3, 0.3, 0.7, 0.3), 0.0);
        assert_eq!(eif_adjusted(false, true, 1.0, 0.4, 0.2, 0.6, 0.7, 0.5), 0.6 - 0.5);
        // Δ ≡ 1, G = 1: 1(a≥v)/g_v (y − Q_v) + Q_v − ψ when Q* = Q_v.
        let d = eif_adjusted(true, true, 1.0, 0.25, 0.6, 0.6, 1.0, 0.5);
        assert!((d - ((1.0 - 0.6) / 0.25 + 0.6 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn tmle_reduces_to_donovan_without_covariates() {
        let a: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37) % 3.0).collect();
        let y: Vec<Option<f64>> = (0..40).map(|i| Some(((i * 7) % 5 < 2) as u8 as f64)).collect();
        let d = ds(&a, &y);
        let spec = NuisanceSpec::default();
        let grid = ThresholdGrid::explicit(vec![0.5, 1.0, 1.5]).unwrap();
        let w = vec![1.0; 40];
        let fits = fit_grid(&d, &grid, &spec, &w).unwrap();
        for f in &fits {
            let don = donovan(&d, f.threshold, &w).unwrap();
            let sr = sr_tmle(&d, f.threshold, f, &w, &spec).unwrap();
            let bin = bin_tmle(&d, f.threshold, f, &w).unwrap();
            assert!((sr.psi - don.psi).abs() < 1e-8, "{} vs {}", sr.psi, don.psi);
            assert!((bin.psi - don.psi).abs() < 1e-8);
            assert!(sr.diagnostics.score_q.unwrap().abs() < 1e-8);
            assert!(sr.diagnostics.eif_mean.abs() < 1e-8);
        }
    }

    #[test]
    fn ipw_with_unit_weights_matches_sr_tmle() {
        let a: Vec<f64> = (0..30).map(|i| i as f64 / 10.0).collect();
        let y: Vec<Option<f64>> = (0..30).map(|i| Some((i % 3 == 0) as u8 as f64)).collect();
        let d = ds(&a, &y);
        let spec = NuisanceSpec::with_all(BasisSpec::InterceptOnly);
        let grid = ThresholdGrid::explicit(vec![1.0]).unwrap();
        let fits = fit_grid(&d, &grid, &spec, &[1.0; 30]).unwrap();
        let sr = sr_tmle(&d, 1.0, &fits[0], &[1.0; 30], &spec).unwrap();
        let sw = SamplingWeights::unit(30);
        for target in [false, true] {
            let ipw = ipw_sr_tmle(&d, 1.0, &fits[0], &sw, target, &spec).unwrap();
            assert_eq!(ipw.psi, sr.psi);
            assert_eq!(ipw.eif, sr.eif);
        }
    }

    #[test]
    fn degenerate_threshold_is_point_mass() {
        let d = ds(&[1.0, 2.0, 3.0, 4.0], &[Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
        let spec = NuisanceSpec::default();
        let grid = ThresholdGrid::explicit(vec![1.5]).unwrap();
        let fits = fit_grid(&d, &grid, &spec, &[1.0; 4]).unwrap();
        let e = sr_tmle(&d, 1.5, &fits[0], &[1.0; 4], &spec).unwrap();
        assert_eq!((e.psi, e.se), (0.0, 0.0));
        assert!(e.diagnostics.degenerate);
    }

    #[test]
    fn outcome_transform_round_trip() {
        let t = OutcomeTransform::new(0.0, 10.0).unwrap();
        let e = ThresholdEstimate {
            threshold: 1.0,
            psi: 0.3,
            eif: vec![0.1],
            se: 0.02,
            tag: EstimatorTag::SrTmle,
            outcome_range: (0.0, 1.0),
            diagnostics: Diagnostics::default(),
        };
        let u = unscale_estimate(&e, t);
        assert!((u.psi - 3.0).abs() < 1e-12 && (u.se - 0.2).abs() < 1e-12);
        let obs = vec![Observation::new(vec![], Some(1.0), Some(2.5)), Observation::new(vec![], Some(2.0), Some(11.0))];
        let d = Dataset::new(obs, vec![], OutcomeKind::BoundedContinuous { lo: 0.0, hi: 20.0 }).unwrap();
        assert!(matches!(scale_outcome(&d, t), Err(DataError::OutOfRangeOutcome { row: 2, .. })));
        let id = OutcomeTransform::new(0.0, 1.0).unwrap();
        assert_eq!(id.forward(0.37), 0.37);
        let t2 = OutcomeTransform::new(-3.0, 7.5).unwrap();
        assert!((t2.back(t2.forward(4.2)) - 4.2).abs() < 1e-12);
    }
}
