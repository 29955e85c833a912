//! Ground truth under a known design: `ψ_v(P₀)` by quadrature, an independent
//! mega-sample check, the asymptotic efficiency loss of the dichotomized
//! estimator, and the stochastic-intervention oracle.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma as GammaLaw};

use super::dgp::{draw_full, BiomarkerLaw, DiscreteDgp, Family};
use super::SimError;
use crate::dataset::ThresholdGrid;
use crate::regress::expit;
use crate::stats::{derive_seed, Quadrature};

/// Weighted nodes for integrating over the covariate distribution.
fn covariate_nodes(family: &Family) -> Vec<(Vec<f64>, f64)> {
    match family {
        Family::Sim1 { .. } | Family::Sim2 { .. } => {
            let law = BiomarkerLaw::TruncNormal { lo: -0.75, hi: 1.5, mean: 0.5, sd: 0.75 };
            let q = Quadrature::new(-0.75, 1.5, 8, 16);
            let mut out = Vec::with_capacity(q.nodes.len() * 4);
            for (&w1, &p1) in q.nodes.iter().zip(&q.weights) {
                for (w2, p2) in [(0.0, 0.4), (1.0, 0.6)] {
                    for (w3, p3) in [(0.0, 0.7), (1.0, 0.3)] {
                        out.push((vec![w1, w2, w3], p1 * law.pdf(w1) * p2 * p3));
                    }
                }
            }
            out
        }
        Family::Confounding { .. } | Family::CoverageD => {
            let q = Quadrature::new(0.0, 1.0, 2, 16);
            let mut out = Vec::with_capacity(q.nodes.len().pow(2));
            for (&w1, &p1) in q.nodes.iter().zip(&q.weights) {
                for (&w2, &p2) in q.nodes.iter().zip(&q.weights) {
                    out.push((vec![w1, w2], p1 * p2));
                }
            }
            out
        }
        Family::BiasedSampling => {
            let qu = Quadrature::new(-1.0, 1.0, 4, 16);
            // W3 ~ Exp(1) through u = 1 − exp(−w3), uniform on (0, 1).
            let qe = Quadrature::new(0.0, 1.0, 8, 16);
            let mut out = Vec::new();
            for (&w1, &p1) in qu.nodes.iter().zip(&qu.weights) {
                for (&w2, &p2) in qu.nodes.iter().zip(&qu.weights) {
                    for (&u, &p3) in qe.nodes.iter().zip(&qe.weights) {
                        out.push((vec![w1, w2, -(1.0 - u).ln()], 0.25 * p1 * p2 * p3));
                    }
                }
            }
            out
        }
        Family::Discrete(d) => d.w_probs.iter().enumerate().map(|(j, &p)| (vec![j as f64], p)).collect(),
    }
}

/// `E[Y | A ≥ v, W = w]`, or `None` when `P(A ≥ v | w) = 0`.
pub fn conditional_mean_above(family: &Family, v: f64, w: &[f64]) -> Option<f64> {
    if let Family::Discrete(d) = family {
        let row = w[0] as usize;
        let (mut num, mut den) = (0.0, 0.0);
        for (j, &a) in d.a_levels.iter().enumerate() {
            if a >= v {
                num += d.a_probs[row][j] * d.y_probs[row][j];
                den += d.a_probs[row][j];
            }
        }
        return (den > 0.0).then(|| num / den);
    }
    let law = family.biomarker_law(w);
    let rule = law.upper_rule(v)?;
    let den = rule.integrate(|a| law.pdf(a));
    (den > 0.0).then(|| rule.integrate(|a| law.pdf(a) * family.p_y(a, w)) / den)
}

/// `ψ_v(P₀)` per threshold by quadrature over `A | W` and `W` (exact sums for
/// discrete designs).
pub fn true_psi(family: &Family, thresholds: &[f64]) -> Result<Vec<f64>, SimError> {
    let family = family.resolved();
    family.validate()?;
    if matches!(family, Family::BiasedSampling) {
        return Ok(biased_sampling_truth(thresholds));
    }
    let nodes = covariate_nodes(&family);
    thresholds
        .par_iter()
        .map(|&v| {
            let mut total = 0.0;
            let mut mass = 0.0;
            for (w, p) in &nodes {
                let m = conditional_mean_above(&family, v, w)
                    .ok_or_else(|| SimError::InvalidParameter(format!("P(A >= {v} | W) = 0 on a covariate stratum")))?;
                total += p * m;
                mass += p;
            }
            Ok(total / mass)
        })
        .collect()
}

const CHEB_POINTS: usize = 96;

/// Chebyshev interpolant of `m(a) = E_W P(Y = 1 | A = a, W)` on `[0, hi]`.
struct MarginalOutcome {
    hi: f64,
    values: Vec<f64>,
}

impl MarginalOutcome {
    fn node(&self, k: usize) -> f64 {
        let t = (std::f64::consts::PI * (k as f64 + 0.5) / CHEB_POINTS as f64).cos();
        0.5 * self.hi * (1.0 + t)
    }

    fn build(family: &Family, hi: f64) -> Self {
        let nodes = covariate_nodes(family);
        let mass: f64 = nodes.iter().map(|(_, p)| p).sum();
        let mut m = MarginalOutcome { hi, values: Vec::new() };
        m.values = (0..CHEB_POINTS)
            .into_par_iter()
            .map(|k| {
                let a = m.node(k);
                nodes.iter().map(|(w, p)| p * family.p_y(a, w)).sum::<f64>() / mass
            })
            .collect();
        m
    }

    /// Barycentric evaluation at first-kind Chebyshev points.
    fn eval(&self, a: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..CHEB_POINTS {
            let x = self.node(k);
            let d = a - x;
            if d == 0.0 {
                return self.values[k];
            }
            let theta = std::f64::consts::PI * (k as f64 + 0.5) / CHEB_POINTS as f64;
            let wk = if k % 2 == 0 { theta.sin() } else { -theta.sin() } / d;
            num += wk * self.values[k];
            den += wk;
        }
        num / den
    }
}

/// With `A` independent of `W`, `ψ_v = ∫_v f(a) m(a) da / P(A ≥ v)`, so one
/// tabulated `m` serves every threshold.
fn biased_sampling_truth(thresholds: &[f64]) -> Vec<f64> {
    static TABLE: std::sync::OnceLock<MarginalOutcome> = std::sync::OnceLock::new();
    let family = Family::BiasedSampling;
    let law = family.biomarker_law(&[0.0, 0.0, 0.0]);
    let rule_top = law.upper_rule(0.0).map(|r| *r.nodes.last().unwrap()).unwrap_or(1.0);
    let table = TABLE.get_or_init(|| MarginalOutcome::build(&family, rule_top.max(1.0) * 1.0001));
    thresholds
        .iter()
        .map(|&v| match law.upper_rule(v) {
            Some(rule) => rule.integrate(|a| law.pdf(a) * table.eval(a)) / rule.integrate(|a| law.pdf(a)),
            None => table.eval(table.hi),
        })
        .collect()
}

pub fn true_psi_grid(family: &Family, grid: &ThresholdGrid) -> Result<Vec<f64>, SimError> {
    true_psi(family, grid.values())
}

/// Mega-sample estimate of `ψ_v` through `E[1(A ≥ v) Y / P(A ≥ v | W)]` with
/// the exact survival function; returns `(estimate, standard error)`.
pub fn true_psi_mega_sample(family: &Family, thresholds: &[f64], n: usize, seed: u64) -> Vec<(f64, f64)> {
    let family = family.resolved();
    let chunk = 65_536;
    let chunks = n.div_ceil(chunk);
    let k = thresholds.len();
    let parts: Vec<Vec<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = chunk.min(n - c * chunk);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let mut acc = vec![(0.0, 0.0); k];
            for _ in 0..len {
                let w = family.draw_w(&mut rng);
                let a = family.draw_a(&w, &mut rng);
                let y = (rng.random::<f64>() < family.p_y(a, &w)) as u8 as f64;
                for (j, &v) in thresholds.iter().enumerate() {
                    if a >= v && y == 1.0 {
                        let x = 1.0 / survival(&family, v, &w);
                        acc[j].0 += x;
                        acc[j].1 += x * x;
                    }
                }
            }
            acc
        })
        .collect();
    (0..k)
        .map(|j| {
            let (s, s2) = parts.iter().fold((0.0, 0.0), |(a, b), p| (a + p[j].0, b + p[j].1));
            let mean = s / n as f64;
            let var = (s2 / n as f64 - mean * mean).max(0.0);
            (mean, (var / n as f64).sqrt())
        })
        .collect()
}

fn survival(family: &Family, v: f64, w: &[f64]) -> f64 {
    match family {
        Family::Discrete(d) => {
            let row = w[0] as usize;
            d.a_levels.iter().zip(&d.a_probs[row]).filter(|(&a, _)| a >= v).map(|(_, &p)| p).sum()
        }
        _ => family.biomarker_law(w).sf(v),
    }
}

/// Population median of the biomarker (closed form where available).
pub fn population_median(family: &Family) -> Result<f64, SimError> {
    match family {
        Family::BiasedSampling => Ok(GammaLaw::new(3.0, 13.0).expect("valid gamma").inverse_cdf(0.5)),
        other => Err(SimError::InvalidParameter(format!("no closed-form median for {}", other.name()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyLoss {
    pub thresholds: Vec<f64>,
    /// `sd(D_coarse) / sd(D) − 1`.
    pub loss: Vec<f64>,
    pub sd_efficient: Vec<f64>,
    pub sd_coarse: Vec<f64>,
    pub n: usize,
}

impl EfficiencyLoss {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "#schema=1")?;
        writeln!(w, "threshold,loss,sd_efficient,sd_coarse")?;
        for j in 0..self.thresholds.len() {
            writeln!(w, "{},{},{},{}", self.thresholds[j], self.loss[j], self.sd_efficient[j], self.sd_coarse[j])?;
        }
        w.flush()
    }
}

const TABLE_POINTS: usize = 1025;

/// Per-threshold tables over `W₁` for each `(W₂, W₃)` cell: `Q_v`, `G_v`, and
/// `E[Y | A ≥ v, W, Δ = 1]`.
struct NuisanceTable {
    lo: f64,
    step: f64,
    /// `[threshold][cell][point] -> (qv, gv_miss, qv_observed)`
    values: Vec<Vec<Vec<(f64, f64, f64)>>>,
}

impl NuisanceTable {
    fn build(family: &Family, thresholds: &[f64]) -> Self {
        let (lo, hi) = (-0.75, 1.5);
        let step = (hi - lo) / (TABLE_POINTS - 1) as f64;
        let values = thresholds
            .par_iter()
            .map(|&v| {
                (0..4)
                    .map(|cell| {
                        let (w2, w3) = ((cell / 2) as f64, (cell % 2) as f64);
                        (0..TABLE_POINTS)
                            .map(|i| {
                                let w = [lo + step * i as f64, w2, w3];
                                let law = family.biomarker_law(&w);
                                let rule = law.upper_rule(v).expect("threshold inside the support");
                                let (mut m0, mut my, mut mg, mut myg) = (0.0, 0.0, 0.0, 0.0);
                                for (&a, &q) in rule.nodes.iter().zip(&rule.weights) {
                                    let f = q * law.pdf(a);
                                    let p = family.p_y(a, &w);
                                    let g = family.p_delta(a, &w);
                                    m0 += f;
                                    my += f * p;
                                    mg += f * g;
                                    myg += f * p * g;
                                }
                                (my / m0, mg / m0, myg / mg)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        NuisanceTable { lo, step, values }
    }

    fn lookup(&self, j: usize, w: &[f64]) -> (f64, f64, f64) {
        let cell = (w[1] as usize) * 2 + w[2] as usize;
        let t = &self.values[j][cell];
        let x = ((w[0] - self.lo) / self.step).clamp(0.0, (TABLE_POINTS - 1) as f64);
        let i = (x.floor() as usize).min(TABLE_POINTS - 2);
        let f = x - i as f64;
        let (a, b) = (t[i], t[i + 1]);
        (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1), a.2 + f * (b.2 - a.2))
    }
}

/// Relative efficiency loss of the dichotomized-biomarker influence function
/// against the efficient one, both evaluated with the true nuisance functions
/// on `n` fresh draws.
pub fn efficiency_loss(family: &Family, thresholds: &[f64], n: usize, seed: u64) -> Result<EfficiencyLoss, SimError> {
    let family = family.resolved();
    family.validate()?;
    if !matches!(family, Family::Sim1 { .. } | Family::Sim2 { .. }) {
        return Err(SimError::InvalidParameter(format!(
            "efficiency loss needs closed-form nuisances; unavailable for {}",
            family.name()
        )));
    }
    if let Some(&v) = thresholds.iter().find(|&&v| !(v < 2.0)) {
        return Err(SimError::InvalidParameter(format!("threshold {v} leaves no biomarker support")));
    }
    let table = NuisanceTable::build(&family, thresholds);
    let k = thresholds.len();
    let chunk = 65_536;
    let chunks = n.div_ceil(chunk);
    // Per chunk and threshold: (count, mean, m2) for the efficient and coarse values.
    type Moments = (f64, f64, f64);
    let parts: Vec<Vec<(Moments, Moments)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = chunk.min(n - c * chunk);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let mut acc = vec![((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)); k];
            for _ in 0..len {
                let r = draw_full(&family, &mut rng);
                let law = family.biomarker_law(&r.w);
                let q = family.p_y(r.a, &r.w);
                let g_miss = family.p_delta(r.a, &r.w);
                let delta = if r.delta { 1.0 } else { 0.0 };
                for (j, &v) in thresholds.iter().enumerate() {
                    let gv = law.sf(v);
                    let (qv, gv_miss, qv_obs) = table.lookup(j, &r.w);
                    let above = if r.a >= v { 1.0 } else { 0.0 };
                    let eff = above / gv * delta / g_miss * (r.y - q) + (q - qv) * above / gv + qv;
                    let coarse = delta * above / (gv * gv_miss) * (r.y - qv_obs) + qv_obs;
                    welford(&mut acc[j].0, eff);
                    welford(&mut acc[j].1, coarse);
                }
            }
            acc
        })
        .collect();
    let mut loss = Vec::with_capacity(k);
    let mut sd_eff = Vec::with_capacity(k);
    let mut sd_coarse = Vec::with_capacity(k);
    for j in 0..k {
        let e = parts.iter().map(|p| p[j].0).fold((0.0, 0.0, 0.0), combine);
        let c = parts.iter().map(|p| p[j].1).fold((0.0, 0.0, 0.0), combine);
        let se = (e.2 / e.0).sqrt();
        let sc = (c.2 / c.0).sqrt();
        sd_eff.push(se);
        sd_coarse.push(sc);
        loss.push(sc / se - 1.0);
    }
    Ok(EfficiencyLoss { thresholds: thresholds.to_vec(), loss, sd_efficient: sd_eff, sd_coarse, n })
}

fn welford(m: &mut (f64, f64, f64), x: f64) {
    m.0 += 1.0;
    let d = x - m.1;
    m.1 += d / m.0;
    m.2 += d * (x - m.1);
}

fn combine(a: (f64, f64, f64), b: (f64, f64, f64)) -> (f64, f64, f64) {
    if a.0 == 0.0 {
        return b;
    }
    let n = a.0 + b.0;
    let d = b.1 - a.1;
    (n, a.1 + d * b.0 / n, a.2 + b.2 + d * d * a.0 * b.0 / n)
}

/// Mean outcome under the intervention that redraws the biomarker of every
/// unit with `a < v` from `A | A ≥ v, W = w`. Returns `(mean, standard error)`.
pub fn intervention_oracle(dgp: &DiscreteDgp, v: f64, n: usize, seed: u64) -> Result<(f64, f64), SimError> {
    let family = Family::Discrete(dgp.clone());
    family.validate()?;
    let upper: Vec<Vec<f64>> = dgp
        .a_probs
        .iter()
        .map(|row| {
            let mass: f64 = row.iter().zip(&dgp.a_levels).filter(|(_, &a)| a >= v).map(|(&p, _)| p).sum();
            row.iter().zip(&dgp.a_levels).map(|(&p, &a)| if a >= v && mass > 0.0 { p / mass } else { 0.0 }).collect()
        })
        .collect();
    for (wi, row) in upper.iter().enumerate() {
        if dgp.w_probs[wi] > 0.0 && row.iter().all(|&p| p == 0.0) {
            return Err(SimError::InvalidParameter(format!("no biomarker mass at or above {v} in stratum {wi}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..n {
        let w = DiscreteDgp::draw_index(&dgp.w_probs, &mut rng);
        let mut j = DiscreteDgp::draw_index(&dgp.a_probs[w], &mut rng);
        if dgp.a_levels[j] < v {
            j = DiscreteDgp::draw_index(&upper[w], &mut rng);
        }
        sum += (rng.random::<f64>() < dgp.y_probs[w][j]) as u8 as f64;
    }
    let mean = sum / n as f64;
    Ok((mean, (mean * (1.0 - mean) / n as f64).sqrt()))
}

/// Ten small discrete designs with full biomarker support in every stratum,
/// each paired with an interior threshold.
pub fn discrete_test_dgps() -> Vec<(DiscreteDgp, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_d15c);
    (0..10)
        .map(|i| {
            let k = 1 + i % 4;
            let m = 2 + i % 4;
            let mut levels: Vec<f64> = (0..m).map(|j| j as f64 + 0.5 * rng.random::<f64>()).collect();
            levels.sort_by(f64::total_cmp);
            let normalize = |v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
            };
            let w_probs = normalize((0..k).map(|_| 0.2 + rng.random::<f64>()).collect());
            let a_probs = (0..k).map(|_| normalize((0..m).map(|_| 0.2 + rng.random::<f64>()).collect())).collect();
            let y_probs = (0..k)
                .map(|_| (0..m).map(|_| expit(2.0 * rng.random::<f64>() - 1.0 + (rng.random::<f64>() - 0.5))).collect())
                .collect();
            let v = levels[m / 2];
            (DiscreteDgp { w_probs, a_levels: levels, a_probs, y_probs }, v)
        })
        .collect()
}
