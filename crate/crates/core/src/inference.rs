//! Pointwise Wald intervals, the cross-threshold influence covariance,
//! simultaneous bands from the max-|Z| statistic, the threshold-existence
//! test and the absolute-protection interval.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::estimators::ThresholdEstimate;
use crate::stats::{derive_seed, z_two_sided};

pub const DEFAULT_DRAWS: usize = 100_000;
const DRAW_CHUNK: usize = 8192;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("influence vectors have different lengths ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("covariance matrix is not positive semidefinite (eigenvalue {0})")]
    NonPsdMatrix(f64),
    #[error("simultaneous bands have not been computed")]
    BandsNotComputed,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("no estimates")]
    Empty,
}

fn clamp_to(est: &ThresholdEstimate, lo: f64, hi: f64) -> (f64, f64) {
    let (rlo, rhi) = est.outcome_range;
    (lo.clamp(rlo, rhi), hi.clamp(rlo, rhi))
}

/// `ψ ± z_{1−α/2} se`, clamped to the outcome range.
pub fn pointwise_ci(est: &ThresholdEstimate, alpha: f64) -> (f64, f64) {
    let half = z_two_sided(alpha) * est.se;
    clamp_to(est, est.psi - half, est.psi + half)
}

/// `Σ̂[j, k] = (1/n) Σᵢ eif_j(i) eif_k(i)`.
pub fn eif_covariance(estimates: &[ThresholdEstimate]) -> Result<DMatrix<f64>, InferenceError> {
    let first = estimates.first().ok_or(InferenceError::Empty)?;
    let n = first.eif.len();
    if let Some(e) = estimates.iter().find(|e| e.eif.len() != n) {
        return Err(InferenceError::DimensionMismatch(n, e.eif.len()));
    }
    let k = estimates.len();
    let m = DMatrix::from_fn(n, k, |i, j| estimates[j].eif[i]);
    Ok(m.tr_mul(&m) / n as f64)
}

/// Simultaneous bands `ψⱼ ± q se_j` where `q` is the Monte-Carlo `1 − α`
/// quantile of `maxⱼ |Zⱼ|`, `Z ~ N(0, corr(Σ))`, floored at `z_{1−α/2}`.
/// Thresholds with zero variance are left out of the max and get point bands.
pub fn simultaneous_bands(
    estimates: &[ThresholdEstimate],
    sigma: &DMatrix<f64>,
    alpha: f64,
    n_draws: usize,
    seed: u64,
) -> Result<(Vec<(f64, f64)>, f64), InferenceError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InferenceError::InvalidAlpha(alpha));
    }
    let k = sigma.nrows();
    if k != estimates.len() || sigma.ncols() != k {
        return Err(InferenceError::DimensionMismatch(k, estimates.len()));
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-8 {
        return Err(InferenceError::NonPsdMatrix(min_eig));
    }
    let z = z_two_sided(alpha);
    let active: Vec<usize> = (0..k).filter(|&j| sym[(j, j)] > 0.0).collect();
    let q = if active.is_empty() || n_draws == 0 {
        z
    } else {
        let sd: Vec<f64> = active.iter().map(|&j| sym[(j, j)].sqrt()).collect();
        let m = active.len();
        let corr = DMatrix::from_fn(m, m, |a, b| sym[(active[a], active[b])] / (sd[a] * sd[b]));
        let q_mc = max_abs_quantile(&corr, 1.0 - alpha, n_draws, seed);
        q_mc.max(z)
    };
    let bands = estimates
        .iter()
        .map(|e| {
            let half = q * e.se;
            clamp_to(e, e.psi - half, e.psi + half)
        })
        .collect();
    Ok((bands, q))
}

/// Empirical `p`-quantile of `max |Z|` for `Z ~ N(0, corr)`.
pub fn max_abs_quantile(corr: &DMatrix<f64>, p: f64, n_draws: usize, seed: u64) -> f64 {
    let m = corr.nrows();
    let eig = SymmetricEigen::new(corr.clone());
    let root = DVector::from_iterator(m, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&root);
    let chunks = n_draws.div_ceil(DRAW_CHUNK);
    let mut maxima: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let len = DRAW_CHUNK.min(n_draws - c * DRAW_CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let factor = &factor;
            (0..len)
                .map(move |_| {
                    let e = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut rng)));
                    (factor * e).amax()
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    crate::dataset::type1_quantile(&maxima, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub grid: Vec<f64>,
    pub estimates: Vec<ThresholdEstimate>,
    pub sigma: Vec<Vec<f64>>,
    pub pointwise: Vec<(f64, f64)>,
    pub simultaneous: Vec<(f64, f64)>,
    pub alpha: f64,
    pub q_simul: f64,
}

impl ThresholdCurve {
    /// Builds the covariance, pointwise intervals and simultaneous bands.
    pub fn new(estimates: Vec<ThresholdEstimate>, alpha: f64, n_draws: usize, seed: u64) -> Result<Self, InferenceError> {
        let sigma = eif_covariance(&estimates)?;
        let (simultaneous, q_simul) = simultaneous_bands(&estimates, &sigma, alpha, n_draws, seed)?;
        let pointwise = estimates.iter().map(|e| pointwise_ci(e, alpha)).collect();
        let k = estimates.len();
        Ok(ThresholdCurve {
            grid: estimates.iter().map(|e| e.threshold).collect(),
            sigma: (0..k).map(|j| (0..k).map(|l| sigma[(j, l)]).collect()).collect(),
            estimates,
            pointwise,
            simultaneous,
            alpha,
            q_simul,
        })
    }

    /// Band table under a `#schema=1` header.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "#schema=1")?;
        writeln!(w, "threshold,psi,se,pw_lo,pw_hi,simul_lo,simul_hi")?;
        for (j, e) in self.estimates.iter().enumerate() {
            let (pl, ph) = self.pointwise[j];
            let (sl, sh) = self.simultaneous.get(j).copied().unwrap_or((f64::NAN, f64::NAN));
            writeln!(w, "{},{},{},{},{},{},{}", e.threshold, e.psi, e.se, pl, ph, sl, sh)?;
        }
        w.flush()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "alpha": self.alpha,
            "q_simul": self.q_simul,
            "tag": self.estimates.first().map(|e| e.tag),
            "thresholds": self.estimates.iter().enumerate().map(|(j, e)| serde_json::json!({
                "threshold": e.threshold,
                "psi": e.psi,
                "se": e.se,
                "pointwise": [self.pointwise[j].0, self.pointwise[j].1],
                "simultaneous": [self.simultaneous[j].0, self.simultaneous[j].1],
                "degenerate": e.diagnostics.degenerate,
            })).collect::<Vec<_>>(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Reject,
    FailToReject,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Reject => "reject",
            Verdict::FailToReject => "fail_to_reject",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTest {
    pub verdict: Verdict,
    pub witness: Option<f64>,
    pub delta: f64,
}

impl ThresholdTest {
    pub fn to_text(&self) -> String {
        let witness = self.witness.map_or_else(|| "none".to_string(), |v| v.to_string());
        format!("verdict={}\nwitness={}\ndelta={}\n", self.verdict, witness, self.delta)
    }
}

/// Rejects "no threshold brings the risk to `delta` or below" when some upper
/// simultaneous band is at most `delta`; the witness is the smallest such threshold.
pub fn test_threshold_exists(curve: &ThresholdCurve, delta: f64) -> Result<ThresholdTest, InferenceError> {
    if curve.simultaneous.len() != curve.grid.len() || curve.grid.is_empty() {
        return Err(InferenceError::BandsNotComputed);
    }
    let witness = curve.grid.iter().zip(&curve.simultaneous).find(|(_, b)| b.1 <= delta).map(|(&v, _)| v);
    Ok(ThresholdTest {
        verdict: if witness.is_some() { Verdict::Reject } else { Verdict::FailToReject },
        witness,
        delta,
    })
}

pub const MONOTONICITY_CAVEAT: &str =
    "valid only if the outcome probability is non-increasing in the biomarker; the upper end is open";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionInterval {
    /// The interval is `(lower, +∞)`.
    pub lower: f64,
    pub no_events: bool,
    pub caveat: String,
}

/// `(max{a : observed event}, ∞)`; without events, `(min a, ∞)` with a flag.
pub fn absolute_protection_interval(data: &Dataset) -> ProtectionInterval {
    let events = data.iter().filter(|o| o.measured() && o.observed() && o.delta_y() == 1.0).filter_map(|o| o.a);
    match events.reduce(f64::max) {
        Some(lower) => ProtectionInterval { lower, no_events: false, caveat: MONOTONICITY_CAVEAT.into() },
        None => ProtectionInterval {
            lower: data.measured_biomarkers().into_iter().fold(f64::INFINITY, f64::min),
            no_events: true,
            caveat: MONOTONICITY_CAVEAT.into(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Observation, OutcomeKind};
    use crate::estimators::{Diagnostics, EstimatorTag};
    use crate::stats::norm_quantile;

    fn est(v: f64, psi: f64, se: f64, eif: Vec<f64>) -> ThresholdEstimate {
        ThresholdEstimate {
            threshold: v,
            psi,
            eif,
            se,
            tag: EstimatorTag::SrTmle,
            outcome_range: (0.0, 1.0),
            diagnostics: Diagnostics::default(),
        }
    }

    #[test]
    fn wald_interval() {
        let (lo, hi) = pointwise_ci(&est(0.0, 0.5, 0.1, vec![]), 0.05);
        assert!((lo - 0.304).abs() < 1e-3 && (hi - 0.696).abs() < 1e-3);
        assert_eq!(pointwise_ci(&est(0.0, 0.5, 0.0, vec![]), 0.05), (0.5, 0.5));
        assert_eq!(pointwise_ci(&est(0.0, 0.01, 0.1, vec![]), 0.05).0, 0.0);
    }

    #[test]
    fn covariance_shapes() {
        let e1 = est(0.0, 0.5, 0.0, vec![1.0, -1.0, 2.0, -2.0]);
        let s = eif_covariance(std::slice::from_ref(&e1)).unwrap();
        assert_eq!(s[(0, 0)], 2.5);
        let s2 = eif_covariance(&[e1.clone(), e1.clone()]).unwrap();
        assert_eq!(s2[(0, 1)], s2[(0, 0)]);
        let short = est(1.0, 0.5, 0.0, vec![1.0]);
        assert_eq!(eif_covariance(&[e1, short]), Err(InferenceError::DimensionMismatch(4, 1)));
    }

    #[test]
    fn critical_values() {
        let z = z_two_sided(0.05);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!((max_abs_quantile(&one, 0.95, 100_000, 1) - z).abs() < 0.01);
        let rank1 = DMatrix::from_element(4, 4, 1.0);
        assert!((max_abs_quantile(&rank1, 0.95, 100_000, 2) - z).abs() < 0.01);
        let indep = DMatrix::<f64>::identity(6, 6);
        let closed = norm_quantile((1.0 + 0.95f64.powf(1.0 / 6.0)) / 2.0);
        assert!((closed - 2.631).abs() < 1e-3);
        assert!((max_abs_quantile(&indep, 0.95, 100_000, 3) - closed).abs() < 0.02);
        assert_eq!(max_abs_quantile(&indep, 0.95, 5000, 9), max_abs_quantile(&indep, 0.95, 5000, 9));
    }

    #[test]
    fn non_psd_rejected() {
        let es = vec![est(0.0, 0.5, 0.1, vec![]), est(1.0, 0.5, 0.1, vec![])];
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(simultaneous_bands(&es, &bad, 0.05, 100, 0), Err(InferenceError::NonPsdMatrix(_))));
    }

    #[test]
    fn degenerate_thresholds_get_point_bands() {
        let es = vec![est(0.0, 0.3, 0.05, vec![0.0; 3]), est(1.0, 0.0, 0.0, vec![0.0; 3])];
        let s = DMatrix::from_row_slice(2, 2, &[7.5e-3, 0.0, 0.0, 0.0]);
        let (bands, q) = simultaneous_bands(&es, &s, 0.05, 20_000, 4).unwrap();
        assert_eq!(bands[1], (0.0, 0.0));
        assert!((q - z_two_sided(0.05)).abs() < 0.03);
    }

    fn curve_with_upper(upper: &[f64]) -> ThresholdCurve {
        ThresholdCurve {
            grid: (0..upper.len()).map(|j| j as f64).collect(),
            estimates: vec![],
            sigma: vec![],
            pointwise: vec![],
            simultaneous: upper.iter().map(|&u| (0.0, u)).collect(),
            alpha: 0.05,
            q_simul: 2.0,
        }
    }

    #[test]
    fn threshold_test() {
        let t = test_threshold_exists(&curve_with_upper(&[0.2, 0.2]), 0.1).unwrap();
        assert_eq!((t.verdict, t.witness), (Verdict::FailToReject, None));
        let t = test_threshold_exists(&curve_with_upper(&[0.3, 0.09, 0.05]), 0.1).unwrap();
        assert_eq!((t.verdict, t.witness), (Verdict::Reject, Some(1.0)));
        let t = test_threshold_exists(&curve_with_upper(&[1.0, 0.7]), 1.0).unwrap();
        assert_eq!(t.verdict, Verdict::Reject);
        let mut c = curve_with_upper(&[0.3]);
        c.simultaneous.clear();
        assert_eq!(test_threshold_exists(&c, 0.1), Err(InferenceError::BandsNotComputed));
    }

    #[test]
    fn protection_interval() {
        let mk = |rows: &[(f64, f64)]| {
            let obs = rows.iter().map(|&(a, y)| Observation::new(vec![], Some(a), Some(y))).collect();
            Dataset::new(obs, vec![], OutcomeKind::Binary).unwrap()
        };
        let p = absolute_protection_interval(&mk(&[(1.1, 1.0), (2.4, 1.0), (0.3, 1.0), (3.0, 0.0)]));
        assert_eq!((p.lower, p.no_events), (2.4, false));
        let p = absolute_protection_interval(&mk(&[(1.1, 0.0), (0.7, 0.0)]));
        assert_eq!((p.lower, p.no_events), (0.7, true));
        assert_eq!(absolute_protection_interval(&mk(&[(5.0, 1.0)])).lower, 5.0);
    }
}
