//! Glue: fit nuisances once per dataset, then run an estimator over a grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, OutcomeKind, ThresholdGrid};
use crate::estimators::{
    bin_tmle, donovan, ipw_sr_tmle, scale_outcome, sr_tmle, unscale_estimate, EstimatorError, EstimatorTag,
    OutcomeTransform, ThresholdEstimate,
};
use crate::nuisance::{fit_grid, fit_sampling_weights, NuisanceFits, NuisanceSpec, SamplingWeights};

/// Where the inverse-probability sampling weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// The dataset's weight column (all ones when absent).
    #[default]
    External,
    /// Empirical `P(R = 1 | Δ, ΔY)`, inverted.
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub nuisance: NuisanceSpec,
    pub sampling: WeightSource,
    /// Target the sampling weights before the IPW-srTMLE (ignored by other estimators).
    pub target_weights: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig { nuisance: NuisanceSpec::default(), sampling: WeightSource::External, target_weights: true }
    }
}

/// Nuisance fits shared by every estimator on one dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub fits: Vec<NuisanceFits>,
    pub sampling: SamplingWeights,
    /// `Rᵢ wᵢ`.
    pub weights: Vec<f64>,
}

pub fn prepare(data: &Dataset, grid: &ThresholdGrid, cfg: &EstimationConfig) -> Result<Prepared, EstimatorError> {
    let sampling = match cfg.sampling {
        WeightSource::External => SamplingWeights::from_external(data),
        WeightSource::Stratified => fit_sampling_weights(data)?,
    };
    let weights = sampling.analysis_weights(data);
    let fits = fit_grid(data, grid, &cfg.nuisance, &weights)?;
    Ok(Prepared { fits, sampling, weights })
}

/// Runs one estimator at every threshold, in parallel.
pub fn run_estimator(
    data: &Dataset,
    prepared: &Prepared,
    cfg: &EstimationConfig,
    tag: EstimatorTag,
) -> Result<Vec<ThresholdEstimate>, EstimatorError> {
    prepared
        .fits
        .par_iter()
        .map(|f| {
            let v = f.threshold;
            match tag {
                EstimatorTag::Donovan => donovan(data, v, &prepared.weights),
                EstimatorTag::BinTmle => bin_tmle(data, v, f, &prepared.weights),
                EstimatorTag::SrTmle => sr_tmle(data, v, f, &prepared.weights, &cfg.nuisance),
                EstimatorTag::IpwSrTmle => {
                    ipw_sr_tmle(data, v, f, &prepared.sampling, cfg.target_weights, &cfg.nuisance)
                }
            }
        })
        .collect()
}

/// Scales a bounded continuous outcome to `[0, 1]` when needed, estimates,
/// and maps the estimates back.
pub fn estimate_curve(
    data: &Dataset,
    grid: &ThresholdGrid,
    cfg: &EstimationConfig,
    tags: &[EstimatorTag],
) -> Result<Vec<Vec<ThresholdEstimate>>, EstimatorError> {
    let transform = match data.outcome_kind() {
        OutcomeKind::BoundedContinuous { lo, hi } if (lo, hi) != (0.0, 1.0) => Some(OutcomeTransform { lo, hi }),
        _ => None,
    };
    let scaled;
    let work = match transform {
        Some(t) => {
            scaled = scale_outcome(data, t).map_err(|e| EstimatorError::InvalidData(e.to_string()))?;
            &scaled
        }
        None => data,
    };
    let prepared = prepare(work, grid, cfg)?;
    tags.iter()
        .map(|&tag| {
            let est = run_estimator(work, &prepared, cfg, tag)?;
            Ok(match transform {
                Some(t) => est.iter().map(|e| unscale_estimate(e, t)).collect(),
                None => est,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Observation;

    #[test]
    fn bounded_outcome_round_trip() {
        let obs: Vec<Observation> = (0..60)
            .map(|i| Observation::new(vec![(i % 4) as f64], Some(i as f64 / 20.0), Some(10.0 * ((i * 7) % 11) as f64 / 10.0)))
            .collect();
        let cont = Dataset::new(obs.clone(), vec!["w".into()], OutcomeKind::BoundedContinuous { lo: 0.0, hi: 10.0 }).unwrap();
        let unit_obs = obs.into_iter().map(|o| Observation { y: o.y.map(|y| y / 10.0), ..o }).collect();
        let unit = Dataset::new(unit_obs, vec!["w".into()], OutcomeKind::BoundedContinuous { lo: 0.0, hi: 1.0 }).unwrap();
        let grid = ThresholdGrid::explicit(vec![0.5, 1.5]).unwrap();
        let cfg = EstimationConfig::default();
        let a = estimate_curve(&cont, &grid, &cfg, &[EstimatorTag::SrTmle]).unwrap();
        let b = estimate_curve(&unit, &grid, &cfg, &[EstimatorTag::SrTmle]).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x.psi - 10.0 * y.psi).abs() < 1e-10);
            assert!((x.se - 10.0 * y.se).abs() < 1e-10);
            assert_eq!(x.outcome_range, (0.0, 10.0));
        }
    }
}
