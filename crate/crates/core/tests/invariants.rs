use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use threshold_tmle::dataset::{canonical_schema, quantile_grid, read_csv, write_csv};
use threshold_tmle::estimators::{donovan, sr_tmle};
use threshold_tmle::inference::{eif_covariance, max_abs_quantile, ThresholdCurve};
use threshold_tmle::nuisance::{fit_grid, fit_sampling_weights, NuisanceSpec};
use threshold_tmle::pipeline::{estimate_curve, EstimationConfig};
use threshold_tmle::regress::{
    expit, fit_weighted_logistic, spline_design, weighted_loglik, weighted_score, BasisSpec, SplineBasis,
};
use threshold_tmle::sims::{generate, monte_carlo_study, DgpSpec, Family, GridChoice, Method, StudyConfig};
use threshold_tmle::stats::{norm_quantile, z_two_sided};
use threshold_tmle::{Dataset, EstimatorTag, Observation, OutcomeKind, ThresholdGrid};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Random logistic problem with an intercept column.
fn logistic_problem(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
    let beta: Vec<f64> = (0..p).map(|_| 0.5 * normal(&mut rng)).collect();
    let y = (0..n)
        .map(|i| {
            let eta: f64 = (0..p).map(|j| x[(i, j)] * beta[j]).sum();
            if rng.random::<f64>() < expit(eta) { 1.0 } else { 0.0 }
        })
        .collect();
    let w = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    (x, y, w)
}

/// Two covariates, continuous biomarker depending on `W`, outcome missingness
/// depending on `A` and `W`, and every biomarker measured.
fn confounded(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = (0..n)
        .map(|_| {
            let w1 = rng.random_range(-1.0..1.0);
            let w2 = if rng.random::<bool>() { 1.0 } else { 0.0 };
            let a = 0.5 * w1 + 0.3 * w2 + normal(&mut rng);
            let y = rng.random::<f64>() < expit(-0.5 + 0.8 * a - w1 + 0.5 * w2);
            let seen = rng.random::<f64>() < expit(1.0 + 0.5 * a - 0.5 * w1);
            Observation::new(vec![w1, w2], Some(a), seen.then_some(y as u8 as f64))
        })
        .collect();
    Dataset::new(obs, vec!["w1".into(), "w2".into()], OutcomeKind::Binary).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn irls_solves_the_score_equation(seed in any::<u64>(), n in 40usize..300, p in 1usize..5) {
        let (x, y, w) = logistic_problem(seed, n, p);
        let offset = vec![0.0; n];
        let fit = fit_weighted_logistic(&x, &y, &w, &offset, &vec![0.0; p]).unwrap();
        prop_assume!(!fit.capped);
        let score = weighted_score(&x, &y, &w, &offset, &fit.coefficients);
        let sup = score.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        prop_assert!(sup <= 1e-8 * n as f64, "score {sup}");
    }

    #[test]
    fn score_matches_finite_differences(seed in any::<u64>(), n in 10usize..80, p in 1usize..4) {
        let (x, y, w) = logistic_problem(seed, n, p);
        let offset: Vec<f64> = (0..n).map(|i| 0.1 * (i % 3) as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let beta: Vec<f64> = (0..p).map(|_| normal(&mut rng)).collect();
        let grad = weighted_score(&x, &y, &w, &offset, &beta);
        let h = 1e-6;
        for j in 0..p {
            let mut up = beta.clone();
            let mut down = beta.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (weighted_loglik(&x, &y, &w, &offset, &up) - weighted_loglik(&x, &y, &w, &offset, &down)) / (2.0 * h);
            prop_assert!((fd - grad[j]).abs() <= 1e-5 * (1.0 + grad[j].abs()), "j={j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn rescaling_weights_leaves_coefficients_unchanged(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let (x, y, w) = logistic_problem(seed, 150, 3);
        let offset = vec![0.0; 150];
        let base = fit_weighted_logistic(&x, &y, &w, &offset, &[0.0; 3]).unwrap();
        prop_assume!(!base.capped);
        let scaled: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let other = fit_weighted_logistic(&x, &y, &scaled, &offset, &[0.0; 3]).unwrap();
        for (a, b) in base.coefficients.iter().zip(&other.coefficients) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn spline_design_is_deterministic(seed in any::<u64>(), degree in 1u32..4, interactions in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| vec![normal(&mut rng), rng.random()]).collect();
        let basis = SplineBasis::at_quantiles(&rows, 2, &[0.25, 0.5, 0.75], degree, interactions);
        let a = spline_design(&rows, &basis).unwrap();
        let b = spline_design(&rows, &basis).unwrap();
        prop_assert_eq!(a.ncols(), basis.n_columns());
        prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn csv_round_trip_is_lossless(seed in any::<u64>(), n in 1usize..40, d in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<Observation> = (0..n)
            .map(|i| {
                let w = (0..d).map(|_| normal(&mut rng) * 1e3).collect();
                let a = (i == 0 || rng.random::<f64>() < 0.7).then(|| normal(&mut rng));
                let y = (rng.random::<f64>() < 0.8).then(|| (rng.random::<bool>()) as u8 as f64);
                Observation::new(w, a, y).with_weight(rng.random_range(0.1..5.0))
            })
            .collect();
        let names = (0..d).map(|j| format!("x{j}")).collect();
        let data = Dataset::new(obs, names, OutcomeKind::Binary).unwrap();
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &canonical_schema(&data)).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn zero_quantile_is_the_smallest_measured_biomarker(seed in any::<u64>(), n in 5usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<Observation> = (0..n)
            .map(|i| {
                let a = (i == 0 || rng.random::<f64>() < 0.8).then(|| normal(&mut rng));
                Observation::new(vec![], a, Some(1.0))
            })
            .collect();
        let data = Dataset::new(obs, vec![], OutcomeKind::Binary).unwrap();
        let min = data.measured_biomarkers().into_iter().fold(f64::INFINITY, f64::min);
        let grid = quantile_grid(&data, &[0.0]).unwrap();
        prop_assert_eq!(grid.values(), &[min][..]);
    }

    #[test]
    fn stratified_weights_average_to_one(seed in any::<u64>(), n in 20usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs: Vec<Observation> = (0..n)
            .map(|_| {
                let y = rng.random::<f64>() < 0.3;
                let seen = rng.random::<f64>() < 0.8;
                let measured = rng.random::<f64>() < if y { 0.9 } else { 0.3 };
                Observation::new(vec![rng.random()], measured.then(|| normal(&mut rng)), seen.then_some(y as u8 as f64))
            })
            .collect();
        // One measured member in every (Δ, ΔY) stratum.
        for (i, y) in [Some(0.0), Some(1.0), None].into_iter().enumerate() {
            obs[i] = Observation::new(vec![0.5], Some(0.0), y);
        }
        let data = Dataset::new(obs, vec!["w".into()], OutcomeKind::Binary).unwrap();
        let s = fit_sampling_weights(&data).unwrap();
        let mean: f64 = s.analysis_weights(&data).iter().sum::<f64>() / n as f64;
        prop_assert!((mean - 1.0).abs() <= 1e-12, "mean R w = {mean}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn nuisance_predictions_respect_the_bound(seed in any::<u64>()) {
        let data = confounded(seed, 400);
        let grid = quantile_grid(&data, &[0.0, 0.3, 0.6, 0.8]).unwrap();
        let spec = NuisanceSpec::default();
        let fits = fit_grid(&data, &grid, &spec, &vec![1.0; 400]).unwrap();
        for f in &fits {
            for v in [&f.gv, &f.q, &f.qv, &f.g_miss, &f.gv_miss] {
                prop_assert!(v.iter().all(|&p| (spec.bound..=1.0 - spec.bound).contains(&p)));
            }
        }
    }

    #[test]
    fn sr_tmle_solves_its_score_equations(seed in any::<u64>(), intercept_only in any::<bool>()) {
        let data = confounded(seed, 500);
        let grid = quantile_grid(&data, &[0.0, 0.25, 0.5, 0.75]).unwrap();
        let spec = if intercept_only { NuisanceSpec::with_all(BasisSpec::InterceptOnly) } else { NuisanceSpec::default() };
        let w = vec![1.0; 500];
        let fits = fit_grid(&data, &grid, &spec, &w).unwrap();
        for f in &fits {
            let e = sr_tmle(&data, f.threshold, f, &w, &spec).unwrap();
            prop_assert!((0.0..=1.0).contains(&e.psi));
            prop_assert!(e.diagnostics.eif_mean.abs() <= 1e-8, "eif mean {}", e.diagnostics.eif_mean);
            if !e.diagnostics.degenerate {
                prop_assert!(e.diagnostics.score_q.unwrap().abs() <= 1e-8);
                prop_assert!(e.diagnostics.score_qv.unwrap().abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn covariance_diagonal_and_band_nesting(seed in any::<u64>(), alpha in 0.01f64..0.2) {
        let data = confounded(seed, 400);
        let grid = quantile_grid(&data, &[0.0, 0.2, 0.4, 0.6]).unwrap();
        let est = estimate_curve(&data, &grid, &EstimationConfig::default(), &[EstimatorTag::SrTmle]).unwrap().remove(0);
        let sigma = eif_covariance(&est).unwrap();
        for (j, e) in est.iter().enumerate() {
            let target = 400.0 * e.se * e.se;
            prop_assert!((sigma[(j, j)] - target).abs() <= 1e-12 * target.max(1.0));
        }
        let curve = ThresholdCurve::new(est, alpha, 2000, seed).unwrap();
        prop_assert!(curve.q_simul >= z_two_sided(alpha));
        for (p, s) in curve.pointwise.iter().zip(&curve.simultaneous) {
            prop_assert!(s.0 <= p.0 && p.1 <= s.1);
        }
        let again = ThresholdCurve::new(curve.estimates.clone(), alpha, 2000, seed).unwrap();
        prop_assert_eq!(again.q_simul.to_bits(), curve.q_simul.to_bits());
    }
}

#[test]
fn max_abs_quantile_matches_closed_forms() {
    let p = 0.95;
    // Independent coordinates: P(max |Z| ≤ q) = (2Φ(q) − 1)^k.
    for k in [1usize, 3, 6] {
        let q = max_abs_quantile(&DMatrix::identity(k, k), p, 200_000, 3);
        let exact = norm_quantile((1.0 + p.powf(1.0 / k as f64)) / 2.0);
        assert!((q - exact).abs() < 0.02, "k={k}: {q} vs {exact}");
    }
    // Perfect correlation collapses to a single |Z|.
    let q = max_abs_quantile(&DMatrix::from_element(4, 4, 1.0), p, 200_000, 3);
    assert!((q - z_two_sided(0.05)).abs() < 0.02, "{q}");
}

#[test]
fn band_quantile_grows_as_correlation_falls() {
    let corr = |r: f64| DMatrix::from_fn(5, 5, |i, j| if i == j { 1.0 } else { r });
    let qs: Vec<f64> = [0.99, 0.8, 0.5, 0.0].iter().map(|&r| max_abs_quantile(&corr(r), 0.95, 100_000, 8)).collect();
    assert!(qs.windows(2).all(|w| w[0] < w[1]), "{qs:?}");
}

#[test]
fn donovan_is_the_mean_outcome_above_threshold() {
    let data = confounded(4, 600);
    let w: Vec<f64> = (0..600).map(|i| 1.0 + (i % 4) as f64).collect();
    for v in [-1.0, 0.0, 0.7] {
        let (num, den) = data
            .iter()
            .zip(&w)
            .filter(|(o, _)| o.above(v) && o.observed())
            .fold((0.0, 0.0), |(s, t), (o, &wi)| (s + wi * o.delta_y(), t + wi));
        let e = donovan(&data, v, &w).unwrap();
        assert!((e.psi - num / den).abs() < 1e-12, "v={v}: {} vs {}", e.psi, num / den);
    }
}

#[test]
fn adjustment_is_harmless_without_confounding() {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let obs = (0..n)
        .map(|_| {
            let w: f64 = rng.random_range(-1.0..1.0);
            let a = normal(&mut rng);
            let y = rng.random::<f64>() < expit(-1.0 + a + w);
            Observation::new(vec![w], Some(a), Some(y as u8 as f64))
        })
        .collect();
    let data = Dataset::new(obs, vec!["w".into()], OutcomeKind::Binary).unwrap();
    let grid = ThresholdGrid::explicit(vec![-0.5, 0.0, 0.5, 1.0]).unwrap();
    let tags = [EstimatorTag::SrTmle, EstimatorTag::Donovan];
    let est = estimate_curve(&data, &grid, &EstimationConfig::default(), &tags).unwrap();
    for (sr, dn) in est[0].iter().zip(&est[1]) {
        let tol = 3.0 * (sr.se * sr.se + dn.se * dn.se).sqrt();
        assert!((sr.psi - dn.psi).abs() <= tol, "v={}: {} vs {}", sr.threshold, sr.psi, dn.psi);
    }
}

fn small_study() -> StudyConfig {
    let grid = GridChoice::Fixed(vec![0.0, 0.4, 0.8]);
    let methods = vec![Method::new(EstimatorTag::SrTmle), Method::new(EstimatorTag::Donovan)];
    let mut cfg = StudyConfig::new(Family::sim1(1.0, 0.0), 400, grid, methods, 12, 77);
    cfg.band_draws = 500;
    cfg
}

#[test]
fn report_rmse_decomposes_into_bias_and_sd() {
    let report = monte_carlo_study(&small_study()).unwrap();
    for (m, row) in report.rows.iter().enumerate() {
        let method = usize::from(m >= 3);
        let errors: Vec<f64> = report.estimates[method].iter().map(|rep| rep[row.index] - row.truth).collect();
        let direct = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
        assert!((row.rmse - direct).abs() <= 1e-10);
        assert!((row.rmse.powi(2) - (row.bias.powi(2) + row.sd.powi(2))).abs() <= 1e-10);
        assert!((0.0..=1.0).contains(&row.pointwise_coverage));
    }
}

#[test]
fn studies_are_reproducible() {
    let a = monte_carlo_study(&small_study()).unwrap();
    let b = monte_carlo_study(&small_study()).unwrap();
    assert_eq!(a, b);
    let mut x = Vec::new();
    let mut y = Vec::new();
    a.write_csv(&mut x).unwrap();
    b.write_csv(&mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn generation_is_seed_deterministic() {
    let spec = DgpSpec::new(Family::Sim2 { const2: 1.0 }, 500, 13);
    assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    let other = generate(&DgpSpec::new(Family::Sim2 { const2: 1.0 }, 500, 14)).unwrap();
    assert_ne!(generate(&spec).unwrap(), other);
}
