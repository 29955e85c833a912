//! Data-generating processes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma as GammaLaw, Normal};

use super::SimError;
use crate::dataset::{Dataset, Observation, OutcomeKind};
use crate::regress::expit;
use crate::stats::{norm_cdf, norm_quantile, Quadrature};

/// `c` of the simultaneous-coverage design.
pub const COVERAGE_D_C: f64 = 0.9375;
/// Target marginal event rate of the confounding family.
pub const CONFOUNDING_EVENT_RATE: f64 = 0.04;

/// Inverse-CDF draw from `N(mean, sd²)` truncated to `[a, b]`. Draws in the
/// lower tail of the mirrored problem when `mean < a` so that the CDF
/// differences do not underflow.
pub fn truncated_normal_sample<R: Rng + ?Sized>(a: f64, b: f64, mean: f64, sd: f64, rng: &mut R) -> f64 {
    if mean < a {
        return -truncated_normal_sample(-b, -a, -mean, sd, rng);
    }
    let pa = norm_cdf((a - mean) / sd);
    let pb = norm_cdf((b - mean) / sd);
    let u: f64 = rng.random();
    let x = mean + sd * norm_quantile(pa + u * (pb - pa));
    x.clamp(a, b)
}

/// Conditional law of the biomarker given covariates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiomarkerLaw {
    TruncNormal { lo: f64, hi: f64, mean: f64, sd: f64 },
    Normal { mean: f64, sd: f64 },
    Gamma { shape: f64, rate: f64 },
}

impl BiomarkerLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            BiomarkerLaw::TruncNormal { lo, hi, mean, sd } => truncated_normal_sample(lo, hi, mean, sd, rng),
            BiomarkerLaw::Normal { mean, sd } => {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                mean + sd * z
            }
            BiomarkerLaw::Gamma { shape, rate } => {
                Gamma::new(shape, 1.0 / rate).expect("valid gamma parameters").sample(rng)
            }
        }
    }

    pub fn pdf(&self, a: f64) -> f64 {
        match *self {
            BiomarkerLaw::TruncNormal { lo, hi, mean, sd } => {
                if a < lo || a > hi {
                    return 0.0;
                }
                let z = norm_cdf((hi - mean) / sd) - norm_cdf((lo - mean) / sd);
                Normal::new(mean, sd).expect("sd > 0").pdf(a) / z
            }
            BiomarkerLaw::Normal { mean, sd } => Normal::new(mean, sd).expect("sd > 0").pdf(a),
            BiomarkerLaw::Gamma { shape, rate } => GammaLaw::new(shape, rate).expect("valid gamma").pdf(a),
        }
    }

    /// `P(A ≥ v)`.
    pub fn sf(&self, v: f64) -> f64 {
        match *self {
            BiomarkerLaw::TruncNormal { lo, hi, mean, sd } => {
                if v <= lo {
                    return 1.0;
                }
                if v >= hi {
                    return 0.0;
                }
                // Upper-tail form keeps precision when `v` is far above the mean.
                let up = |x: f64| norm_cdf((mean - x) / sd);
                (up(v) - up(hi)) / (up(lo) - up(hi))
            }
            BiomarkerLaw::Normal { mean, sd } => norm_cdf((mean - v) / sd),
            BiomarkerLaw::Gamma { shape, rate } => {
                if v <= 0.0 {
                    1.0
                } else {
                    GammaLaw::new(shape, rate).expect("valid gamma").sf(v)
                }
            }
        }
    }

    /// Quadrature rule on `{a ≥ v}` (truncated where the density is negligible).
    pub fn upper_rule(&self, v: f64) -> Option<Quadrature> {
        let (lo, hi, panels) = match *self {
            BiomarkerLaw::TruncNormal { lo, hi, .. } => (v.max(lo), hi, 8),
            BiomarkerLaw::Normal { mean, sd } => (v.max(mean - 10.0 * sd), mean + 10.0 * sd, 16),
            BiomarkerLaw::Gamma { shape, rate } => {
                let top = (shape + 40.0) / rate;
                (v.max(0.0), top, 24)
            }
        };
        (hi > lo).then(|| Quadrature::new(lo, hi, panels, 16))
    }
}

/// A finite data-generating process with `W ∈ {0, …, k−1}`, `A` on finitely
/// many levels, `Δ ≡ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDgp {
    pub w_probs: Vec<f64>,
    pub a_levels: Vec<f64>,
    /// `P(A = a_levels[j] | W = w)`, one row per `w`.
    pub a_probs: Vec<Vec<f64>>,
    /// `P(Y = 1 | A = a_levels[j], W = w)`.
    pub y_probs: Vec<Vec<f64>>,
}

impl DiscreteDgp {
    fn validate(&self) -> Result<(), SimError> {
        let k = self.w_probs.len();
        let m = self.a_levels.len();
        let ok = k > 0
            && m > 0
            && self.a_probs.len() == k
            && self.y_probs.len() == k
            && self.a_probs.iter().all(|r| r.len() == m)
            && self.y_probs.iter().all(|r| r.len() == m && r.iter().all(|p| (0.0..=1.0).contains(p)))
            && (self.w_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9
            && self.a_probs.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidParameter("inconsistent discrete distribution tables".into()))
        }
    }

    pub(crate) fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// Efficiency design: `constant ∈ {0, 1}`, `offset ∈ {0, −3}`;
    /// `missingness = false` gives the `Δ ≡ 1` variant.
    Sim1 { constant: f64, offset: f64, missingness: bool },
    /// Complex-missingness design with `offset = −3`, `constant = 1`.
    Sim2 { const2: f64 },
    /// Confounding design; `k` scales the event probability.
    Confounding { c: f64, k: f64 },
    /// Confounding design at `c = 0.9375`, `k` calibrated to `P(Y = 1) = 0.04`.
    CoverageD,
    /// Case-control sampling of the biomarker.
    BiasedSampling,
    Discrete(DiscreteDgp),
}

impl Family {
    pub fn sim1(constant: f64, offset: f64) -> Self {
        Family::Sim1 { constant, offset, missingness: true }
    }

    /// Confounding family with `K_c` set so that `P(Y = 1) = 0.04`.
    pub fn confounding(c: f64) -> Result<Self, SimError> {
        if !(0.0..=2.5).contains(&c) {
            return Err(SimError::InvalidParameter(format!("confounding level {c} outside [0, 2.5]")));
        }
        Ok(Family::Confounding { c, k: calibrate_k(c) })
    }

    /// Parses a family name with default parameters.
    pub fn from_name(name: &str) -> Result<Self, SimError> {
        match name {
            "sim1" => Ok(Family::sim1(0.0, 0.0)),
            "sim2" => Ok(Family::Sim2 { const2: 1.0 }),
            "confounding" => Family::confounding(COVERAGE_D_C),
            "coverage_d" => Ok(Family::CoverageD),
            "biased_sampling" => Ok(Family::BiasedSampling),
            other => Err(SimError::UnknownFamily(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Sim1 { .. } => "sim1",
            Family::Sim2 { .. } => "sim2",
            Family::Confounding { .. } => "confounding",
            Family::CoverageD => "coverage_d",
            Family::BiasedSampling => "biased_sampling",
            Family::Discrete(_) => "discrete",
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidParameter(m));
        match self {
            Family::Sim1 { constant, offset, .. } => {
                if *constant != 0.0 && *constant != 1.0 {
                    return bad(format!("const must be 0 or 1, got {constant}"));
                }
                if *offset != 0.0 && *offset != -3.0 {
                    return bad(format!("offset must be 0 or -3, got {offset}"));
                }
                Ok(())
            }
            Family::Sim2 { const2 } if *const2 != 0.0 && *const2 != 1.0 => bad(format!("const2 must be 0 or 1, got {const2}")),
            Family::Confounding { c, k } if !(0.0..=2.5).contains(c) || !(*k > 0.0 && *k * 0.1 <= 1.0) => {
                bad(format!("confounding parameters c={c}, k={k} out of range"))
            }
            Family::Discrete(d) => d.validate(),
            _ => Ok(()),
        }
    }

    /// Resolves aliases to their parameterized form.
    pub fn resolved(&self) -> Family {
        match self {
            Family::CoverageD => {
                static K: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
                Family::Confounding { c: COVERAGE_D_C, k: *K.get_or_init(|| calibrate_k(COVERAGE_D_C)) }
            }
            other => other.clone(),
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        let n = match self {
            Family::Sim1 { .. } | Family::Sim2 { .. } | Family::BiasedSampling => 3,
            Family::Confounding { .. } | Family::CoverageD => 2,
            Family::Discrete(_) => 1,
        };
        (1..=n).map(|j| format!("w{j}")).collect()
    }

    pub fn draw_w<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Family::Sim1 { .. } | Family::Sim2 { .. } => {
                let w1 = truncated_normal_sample(-0.75, 1.5, 0.5, 0.75, rng);
                let w2 = (rng.random::<f64>() < 0.6) as u8 as f64;
                let w3 = (rng.random::<f64>() < 0.3) as u8 as f64;
                vec![w1, w2, w3]
            }
            Family::Confounding { .. } | Family::CoverageD => vec![rng.random(), rng.random()],
            Family::BiasedSampling => {
                let w1 = rng.random_range(-1.0..1.0);
                let w2 = rng.random_range(-1.0..1.0);
                let w3: f64 = Exp1.sample(rng);
                vec![w1, w2, w3]
            }
            Family::Discrete(d) => vec![DiscreteDgp::draw_index(&d.w_probs, rng) as f64],
        }
    }

    /// Continuous biomarker law given `w` (not defined for discrete designs).
    pub fn biomarker_law(&self, w: &[f64]) -> BiomarkerLaw {
        match self {
            Family::Sim1 { .. } | Family::Sim2 { .. } => BiomarkerLaw::TruncNormal {
                lo: 0.0,
                hi: 2.0,
                mean: (0.8 + w[0] + (w[1] + w[2]) / 2.0) / 2.0,
                sd: 0.5,
            },
            Family::Confounding { .. } | Family::CoverageD => BiomarkerLaw::Normal { mean: -0.6 * w[1], sd: 0.3 },
            Family::BiasedSampling => BiomarkerLaw::Gamma { shape: 3.0, rate: 13.0 },
            Family::Discrete(_) => unreachable!("discrete designs have no density"),
        }
    }

    pub fn draw_a<R: Rng + ?Sized>(&self, w: &[f64], rng: &mut R) -> f64 {
        match self {
            Family::Discrete(d) => d.a_levels[DiscreteDgp::draw_index(&d.a_probs[w[0] as usize], rng)],
            _ => self.biomarker_law(w).sample(rng),
        }
    }

    /// `P(Y = 1 | A = a, W = w)`.
    pub fn p_y(&self, a: f64, w: &[f64]) -> f64 {
        match self {
            Family::Sim1 { constant, offset, .. } => sim_outcome(*offset, *constant, a, w),
            Family::Sim2 { .. } => sim_outcome(-3.0, 1.0, a, w),
            Family::Confounding { c, k } => confounding_outcome(*c, *k, a, w),
            Family::CoverageD => self.resolved().p_y(a, w),
            Family::BiasedSampling => {
                let (w1, w2, w3) = (w[0], w[1], w[2]);
                let s3 = |x: f64| (3.0 * x).sin();
                let inner = 0.5 - 1.5 * a + 0.25 * (w1 + w2 + w3) + s3(w1) + s3(w2) + (1.0 + w3).ln()
                    + 2.0 * w1 * s3(w2)
                    + 2.0 * w2 * s3(w1)
                    + w3 * s3(w1)
                    + w3 * (a - 0.4)
                    + w3 * (3.0 * w1).cos();
                expit(-4.7 + 0.7 * (0.7 * inner))
            }
            Family::Discrete(d) => {
                let j = d.a_levels.iter().position(|&l| l == a).expect("level of the design");
                d.y_probs[w[0] as usize][j]
            }
        }
    }

    /// `P(Δ = 1 | A = a, W = w)`.
    pub fn p_delta(&self, a: f64, w: &[f64]) -> f64 {
        match self {
            Family::Sim1 { missingness: true, .. } => expit(-1.0 + w[0] + w[1] + w[2]),
            Family::Sim2 { const2 } => expit(-1.0 + a + const2 * 2.0 * (6.0 * a).sin() + w[0] + (w[1] + w[2]) / 2.0),
            _ => 1.0,
        }
    }

    /// `P(R = 1 | Y = y)`.
    pub fn p_measured(&self, y: f64) -> f64 {
        match self {
            Family::BiasedSampling if y == 0.0 => 0.1,
            _ => 1.0,
        }
    }
}

fn sim_outcome(offset: f64, constant: f64, a: f64, w: &[f64]) -> f64 {
    expit(offset + 0.75 * w[0] - 0.2 + 0.5 * (w[1] + w[2]) - a + constant * 2.0 * (6.0 * a).sin())
}

fn confounding_outcome(c: f64, k: f64, a: f64, w: &[f64]) -> f64 {
    k * 0.1 * expit(-1.0 - 1.3 * a - a.exp() - 2.0 * a * a + w[0] - 0.25 * a * w[0] + c * w[1])
}

/// `K_c` with `P(Y = 1) = 0.04`. The event probability is linear in `K_c`, so
/// this is `0.04 / E[0.1 expit(·)]` with the expectation computed by quadrature.
pub fn calibrate_k(c: f64) -> f64 {
    let unit = Family::Confounding { c, k: 1.0 };
    let wq = Quadrature::new(0.0, 1.0, 4, 16);
    let mut total = 0.0;
    for (&w1, &p1) in wq.nodes.iter().zip(&wq.weights) {
        for (&w2, &p2) in wq.nodes.iter().zip(&wq.weights) {
            let w = [w1, w2];
            let law = unit.biomarker_law(&w);
            let rule = law.upper_rule(f64::NEG_INFINITY).expect("non-empty support");
            total += p1 * p2 * rule.integrate(|a| law.pdf(a) * unit.p_y(a, &w));
        }
    }
    CONFOUNDING_EVENT_RATE / total
}

/// A design and sample size with its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub family: Family,
    pub n: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(family: Family, n: usize, seed: u64) -> Self {
        DgpSpec { family, n, seed }
    }
}

/// Full-data draw before coarsening.
#[derive(Debug, Clone, PartialEq)]
pub struct FullRecord {
    pub w: Vec<f64>,
    pub a: f64,
    pub y: f64,
    pub delta: bool,
    pub measured: bool,
}

pub fn draw_full<R: Rng + ?Sized>(family: &Family, rng: &mut R) -> FullRecord {
    let w = family.draw_w(rng);
    let a = family.draw_a(&w, rng);
    let y = (rng.random::<f64>() < family.p_y(a, &w)) as u8 as f64;
    let delta = rng.random::<f64>() < family.p_delta(a, &w);
    let measured = rng.random::<f64>() < family.p_measured(y);
    FullRecord { w, a, y, delta, measured }
}

/// Deterministic dataset for `(spec, seed)`.
pub fn generate(spec: &DgpSpec) -> Result<Dataset, SimError> {
    if spec.n == 0 {
        return Err(SimError::InvalidParameter("n must be at least 1".into()));
    }
    let family = spec.family.resolved();
    family.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let obs: Vec<Observation> = (0..spec.n)
        .map(|_| {
            let r = draw_full(&family, &mut rng);
            Observation::new(r.w, r.measured.then_some(r.a), r.delta.then_some(r.y))
        })
        .collect();
    Dataset::new(obs, family.covariate_names(), OutcomeKind::Binary).map_err(|e| SimError::Data(e.to_string()))
}
