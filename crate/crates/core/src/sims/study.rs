//! Monte-Carlo study driver.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate, DgpSpec, Family};
use super::truth::true_psi;
use super::SimError;
use crate::dataset::{quantile_grid, ThresholdGrid};
use crate::estimators::EstimatorTag;
use crate::inference::{pointwise_ci, ThresholdCurve};
use crate::pipeline::{prepare, run_estimator, EstimationConfig};
use crate::stats::derive_seed;

/// Largest tolerated fraction of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.02;

/// An estimator together with its sampling-weight option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub tag: EstimatorTag,
    pub target_weights: bool,
}

impl Method {
    pub fn new(tag: EstimatorTag) -> Self {
        Method { tag, target_weights: true }
    }

    pub fn untargeted(tag: EstimatorTag) -> Self {
        Method { tag, target_weights: false }
    }

    pub fn label(&self) -> String {
        match (self.tag, self.target_weights) {
            (EstimatorTag::IpwSrTmle, false) => "ipw_sr_tmle_untargeted".into(),
            (tag, _) => tag.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum GridChoice {
    Fixed(Vec<f64>),
    /// Empirical biomarker quantiles of each replicate; the truth is evaluated
    /// at each replicate's own thresholds.
    SampleQuantiles(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub family: Family,
    pub n: usize,
    pub grid: GridChoice,
    pub methods: Vec<Method>,
    pub n_reps: usize,
    pub base_seed: u64,
    pub alpha: f64,
    pub estimation: EstimationConfig,
    /// Monte-Carlo draws for the simultaneous critical value; 0 skips the bands.
    pub band_draws: usize,
}

impl StudyConfig {
    pub fn new(family: Family, n: usize, grid: GridChoice, methods: Vec<Method>, n_reps: usize, base_seed: u64) -> Self {
        StudyConfig {
            family,
            n,
            grid,
            methods,
            n_reps,
            base_seed,
            alpha: 0.05,
            estimation: EstimationConfig::default(),
            band_draws: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum TruthProvenance {
    ClosedForm,
    MegaSample(usize),
}

/// One replication: per method, per threshold `(threshold, truth, psi, se, covered)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub rows: Vec<Vec<(f64, f64, f64, f64, bool)>>,
    pub simultaneous: Vec<Option<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub method: String,
    pub index: usize,
    pub threshold: f64,
    pub truth: f64,
    pub bias: f64,
    pub abs_bias: f64,
    /// Spread of the estimation errors with denominator `R`; the SD of the
    /// estimates when the grid is fixed.
    pub sd: f64,
    pub mean_se: f64,
    pub rmse: f64,
    pub pointwise_coverage: f64,
    pub simultaneous_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub design: String,
    pub n: usize,
    pub n_reps: usize,
    pub n_failed: usize,
    pub failure_rate: f64,
    pub truth: Vec<f64>,
    pub truth_provenance: TruthProvenance,
    pub rows: Vec<ThresholdSummary>,
    /// Per method, per replication estimates (for custom summaries).
    #[serde(skip)]
    pub estimates: Vec<Vec<Vec<f64>>>,
}

impl SimulationReport {
    pub fn rows_for(&self, label: &str) -> Vec<&ThresholdSummary> {
        self.rows.iter().filter(|r| r.method == label).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "#schema=1")?;
        writeln!(
            w,
            "estimator,index,threshold,truth,bias,abs_bias,sd,mean_se,rmse,pointwise_coverage,simultaneous_coverage,n_reps,n_failed"
        )?;
        for r in &self.rows {
            let sim = r.simultaneous_coverage.map_or_else(String::new, |c| c.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.method, r.index, r.threshold, r.truth, r.bias, r.abs_bias, r.sd, r.mean_se, r.rmse,
                r.pointwise_coverage, sim, self.n_reps, self.n_failed
            )?;
        }
        w.flush()
    }

    /// Long format: one row per `(estimator, n, threshold, metric)`.
    pub fn write_long_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "#schema=1")?;
        writeln!(w, "estimator,n,threshold,metric,value")?;
        for r in &self.rows {
            for (metric, value) in [
                ("se", r.sd),
                ("mean_se", r.mean_se),
                ("abs_bias", r.abs_bias),
                ("rmse", r.rmse),
                ("coverage", r.pointwise_coverage),
            ] {
                writeln!(w, "{},{},{},{},{}", r.method, self.n, r.threshold, metric, value)?;
            }
        }
        w.flush()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "design={} n={} reps={} failed={} ({:.1}%)",
            self.design,
            self.n,
            self.n_reps,
            self.n_failed,
            100.0 * self.failure_rate
        );
        let _ = writeln!(
            s,
            "{:<24} {:>9} {:>8} {:>9} {:>8} {:>8} {:>8} {:>7} {:>7}",
            "estimator", "threshold", "truth", "bias", "sd", "mean_se", "rmse", "cover", "simul"
        );
        for r in &self.rows {
            let sim = r.simultaneous_coverage.map_or_else(|| "-".to_string(), |c| format!("{c:.3}"));
            let _ = writeln!(
                s,
                "{:<24} {:>9.4} {:>8.4} {:>9.5} {:>8.5} {:>8.5} {:>8.5} {:>7.3} {:>7}",
                r.method, r.threshold, r.truth, r.bias, r.sd, r.mean_se, r.rmse, r.pointwise_coverage, sim
            );
        }
        s
    }
}

/// Runs one replication with its derived seed.
pub fn run_replication(cfg: &StudyConfig, rep: usize) -> Result<Replication, SimError> {
    let seed = derive_seed(cfg.base_seed, rep as u64);
    let data = generate(&DgpSpec::new(cfg.family.clone(), cfg.n, seed))?;
    let grid = match &cfg.grid {
        GridChoice::Fixed(v) => ThresholdGrid::explicit(v.clone()),
        GridChoice::SampleQuantiles(p) => quantile_grid(&data, p),
    }
    .map_err(|e| SimError::Data(e.to_string()))?;
    if let GridChoice::SampleQuantiles(p) = &cfg.grid {
        if grid.len() != p.len() {
            return Err(SimError::Data("tied sample quantiles".into()));
        }
    }
    let truth = true_psi(&cfg.family, grid.values())?;
    let mut est_cfg = cfg.estimation.clone();
    let prepared = prepare(&data, &grid, &est_cfg)?;
    let mut rows = Vec::with_capacity(cfg.methods.len());
    let mut simultaneous = Vec::with_capacity(cfg.methods.len());
    for m in &cfg.methods {
        est_cfg.target_weights = m.target_weights;
        let est = run_estimator(&data, &prepared, &est_cfg, m.tag)?;
        let row: Vec<_> = est
            .iter()
            .zip(&truth)
            .map(|(e, &t)| {
                let (lo, hi) = pointwise_ci(e, cfg.alpha);
                (e.threshold, t, e.psi, e.se, lo <= t && t <= hi)
            })
            .collect();
        let sim = if cfg.band_draws > 0 {
            let curve = ThresholdCurve::new(est, cfg.alpha, cfg.band_draws, derive_seed(seed, 1 << 32))
                .map_err(|e| SimError::Numerical(e.to_string()))?;
            Some(curve.simultaneous.iter().zip(&truth).all(|(b, &t)| b.0 <= t && t <= b.1))
        } else {
            None
        };
        rows.push(row);
        simultaneous.push(sim);
    }
    Ok(Replication { rows, simultaneous })
}

/// Runs `n_reps` independent replications and aggregates them. Failed
/// replications are counted; more than 2% failures is an error.
pub fn monte_carlo_study(cfg: &StudyConfig) -> Result<SimulationReport, SimError> {
    if cfg.n_reps == 0 {
        return Err(SimError::InvalidParameter("n_reps must be at least 1".into()));
    }
    if cfg.methods.is_empty() {
        return Err(SimError::InvalidParameter("no estimators selected".into()));
    }
    cfg.family.resolved().validate()?;
    let results: Vec<Result<Replication, SimError>> =
        (0..cfg.n_reps).into_par_iter().map(|r| run_replication(cfg, r)).collect();
    let n_failed = results.iter().filter(|r| r.is_err()).count();
    let failure_rate = n_failed as f64 / cfg.n_reps as f64;
    if failure_rate > MAX_FAILURE_RATE {
        let first = results.iter().find_map(|r| r.as_ref().err()).map(|e| e.to_string()).unwrap_or_default();
        return Err(SimError::TooManyFailures { failed: n_failed, total: cfg.n_reps, first });
    }
    let ok: Vec<&Replication> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    if ok.is_empty() {
        return Err(SimError::TooManyFailures { failed: n_failed, total: cfg.n_reps, first: String::new() });
    }
    let reps = ok.len() as f64;
    let k = ok[0].rows[0].len();
    let mut rows = Vec::new();
    let mut estimates = Vec::new();
    let mut truth = vec![0.0; k];
    for (mi, m) in cfg.methods.iter().enumerate() {
        let mut per_rep = Vec::with_capacity(ok.len());
        for rep in &ok {
            per_rep.push(rep.rows[mi].iter().map(|r| r.2).collect::<Vec<f64>>());
        }
        estimates.push(per_rep);
        let sim_cov = ok[0].simultaneous[mi]
            .map(|_| ok.iter().filter(|r| r.simultaneous[mi] == Some(true)).count() as f64 / reps);
        for j in 0..k {
            let cells: Vec<_> = ok.iter().map(|r| r.rows[mi][j]).collect();
            let err: Vec<f64> = cells.iter().map(|c| c.2 - c.1).collect();
            let bias = err.iter().sum::<f64>() / reps;
            let sd = (err.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / reps).sqrt();
            let mse = err.iter().map(|e| e * e).sum::<f64>() / reps;
            let t = cells.iter().map(|c| c.1).sum::<f64>() / reps;
            truth[j] = t;
            rows.push(ThresholdSummary {
                method: m.label(),
                index: j,
                threshold: cells.iter().map(|c| c.0).sum::<f64>() / reps,
                truth: t,
                bias,
                abs_bias: bias.abs(),
                sd,
                mean_se: cells.iter().map(|c| c.3).sum::<f64>() / reps,
                rmse: mse.sqrt(),
                pointwise_coverage: cells.iter().filter(|c| c.4).count() as f64 / reps,
                simultaneous_coverage: sim_cov,
            });
        }
    }
    Ok(SimulationReport {
        design: cfg.family.name().into(),
        n: cfg.n,
        n_reps: cfg.n_reps,
        n_failed,
        failure_rate,
        truth,
        truth_provenance: TruthProvenance::ClosedForm,
        rows,
        estimates,
    })
}
