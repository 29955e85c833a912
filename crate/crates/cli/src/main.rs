use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use threshold_tmle::dataset::{load_csv, quantile_grid, CsvSchema, DataError, Dataset, OutcomeKind, ThresholdGrid};
use threshold_tmle::estimators::{estimates_json, write_estimates_csv, EstimatorError, EstimatorTag};
use threshold_tmle::inference::{test_threshold_exists, InferenceError, ThresholdCurve};
use threshold_tmle::nuisance::{NuisanceError, NuisanceSpec};
use threshold_tmle::pipeline::{estimate_curve, EstimationConfig, WeightSource};
use threshold_tmle::regress::BasisSpec;
use threshold_tmle::sims::truth::efficiency_loss;
use threshold_tmle::sims::{monte_carlo_study, Family, GridChoice, Method, SimError, StudyConfig};

const THREADS_ENV: &str = "THRESHOLD_TMLE_THREADS";

#[derive(Parser)]
#[command(name = "threshold-tmle", version, about = "Covariate-adjusted threshold-response estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the threshold-response curve and write one row per threshold.
    Estimate(EstimateArgs),
    /// Estimate plus pointwise and simultaneous confidence bands.
    Bands(BandArgs),
    /// Test whether some threshold brings the risk to `--delta` or below.
    TestThreshold(TestArgs),
    /// Run a Monte-Carlo study on a simulation design.
    Simulate(SimulateArgs),
    /// Efficiency loss of dichotomizing the biomarker, with true nuisances.
    EffLoss(EffLossArgs),
}

#[derive(Args)]
struct GridArgs {
    /// Explicit thresholds, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "grid_quantiles", allow_negative_numbers = true)]
    grid: Option<Vec<f64>>,
    /// Biomarker quantile probabilities, comma separated.
    #[arg(long, value_delimiter = ',')]
    grid_quantiles: Option<Vec<f64>>,
    /// Measured observations required at or above the largest threshold.
    #[arg(long, default_value_t = 10)]
    min_above: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisKind {
    Intercept,
    Spline,
    Saturated,
}

#[derive(Clone, Copy, ValueEnum)]
enum IpwMode {
    /// Use the weight column (or unit weights).
    Weights,
    /// Estimate P(R = 1 | Δ, ΔY) from the data.
    Stratified,
}

#[derive(Args)]
struct NuisanceArgs {
    #[arg(long, value_enum, default_value = "spline")]
    basis: BasisKind,
    /// Spline knots as covariate quantile probabilities.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8")]
    knots: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    degree: u32,
    /// Add pairwise products of the covariates.
    #[arg(long)]
    interactions: bool,
    /// Probability bound for the nuisance fits.
    #[arg(long, default_value_t = 0.005)]
    bound: f64,
    #[arg(long, value_enum, default_value = "weights")]
    ipw: IpwMode,
    /// Skip targeting of the sampling weights for ipw_sr_tmle.
    #[arg(long)]
    no_target: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    biomarker: String,
    #[arg(long)]
    outcome: String,
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Outcome-observed indicator column.
    #[arg(long)]
    missingness: Option<String>,
    /// Biomarker-measured indicator column.
    #[arg(long)]
    measured: Option<String>,
    /// Sampling weight column.
    #[arg(long)]
    weight: Option<String>,
    /// Range `lo,hi` of a bounded continuous outcome; binary when absent.
    #[arg(long, value_delimiter = ',', num_args = 2, allow_negative_numbers = true)]
    outcome_range: Option<Vec<f64>>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    /// Estimators, comma separated: sr_tmle, bin_tmle, donovan, ipw_sr_tmle.
    #[arg(long, value_delimiter = ',', default_value = "sr_tmle")]
    estimator: Vec<String>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write a JSON summary to this path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BandArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    #[arg(long, default_value = "sr_tmle")]
    estimator: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte-Carlo draws for the simultaneous critical value.
    #[arg(long, default_value_t = threshold_tmle::inference::DEFAULT_DRAWS)]
    draws: usize,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    bands: BandArgs,
    /// Risk level the threshold should bring the outcome probability to.
    #[arg(long)]
    delta: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// sim1, sim2, confounding, coverage_d or biased_sampling.
    #[arg(long)]
    design: String,
    #[arg(long = "const")]
    constant: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    offset: Option<f64>,
    #[arg(long)]
    const2: Option<f64>,
    /// Confounding strength for the confounding design.
    #[arg(long)]
    confounding: Option<f64>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    reps: usize,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    /// Estimators to compare; `ipw_sr_tmle_untargeted` adds the untargeted IPW fit.
    #[arg(long, value_delimiter = ',')]
    estimator: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draws for the simultaneous bands in each replicate; 0 skips them.
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    /// Write one row per (estimator, n, threshold, metric) instead.
    #[arg(long)]
    long: bool,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct EffLossArgs {
    /// sim1 or sim2.
    #[arg(long, default_value = "sim1")]
    design: String,
    #[arg(long = "const")]
    constant: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    offset: Option<f64>,
    #[arg(long)]
    const2: Option<f64>,
    /// Use the variant in which every outcome is observed.
    #[arg(long)]
    no_missingness: bool,
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Data(m) => ("data", m),
            CliError::Numerical(m) => ("numerical", m),
        };
        format!("error[{kind}]: {}", msg.replace('\n', " "))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        let msg = e.to_string();
        match e {
            EstimatorError::TargetingDiverged { .. }
            | EstimatorError::Regress(_)
            | EstimatorError::Nuisance(NuisanceError::Regress(_)) => CliError::Numerical(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::InvalidAlpha(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::UnknownFamily(_) | SimError::InvalidParameter(_) => CliError::Usage(e.to_string()),
            SimError::Data(_) => CliError::Data(e.to_string()),
            SimError::Estimator(inner) => inner.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn parse_tags(names: &[String]) -> Result<Vec<EstimatorTag>, CliError> {
    names
        .iter()
        .map(|s| EstimatorTag::parse(s.trim()).ok_or_else(|| CliError::Usage(format!("unknown estimator `{s}`"))))
        .collect()
}

fn estimation_config(args: &NuisanceArgs) -> Result<EstimationConfig, CliError> {
    if !(args.bound > 0.0 && args.bound < 0.5) {
        return Err(CliError::Usage(format!("bound must lie in (0, 0.5), got {}", args.bound)));
    }
    if args.knots.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(CliError::Usage("knot probabilities must lie in [0, 1]".into()));
    }
    if args.degree == 0 || args.degree > 3 {
        return Err(CliError::Usage(format!("degree must be 1, 2 or 3, got {}", args.degree)));
    }
    let basis = match args.basis {
        BasisKind::Intercept => BasisSpec::InterceptOnly,
        BasisKind::Saturated => BasisSpec::Saturated,
        BasisKind::Spline => {
            BasisSpec::Spline { degree: args.degree, knot_probs: args.knots.clone(), interactions: args.interactions }
        }
    };
    let mut nuisance = NuisanceSpec::with_all(basis);
    nuisance.bound = args.bound;
    Ok(EstimationConfig {
        nuisance,
        sampling: match args.ipw {
            IpwMode::Weights => WeightSource::External,
            IpwMode::Stratified => WeightSource::Stratified,
        },
        target_weights: !args.no_target,
    })
}

fn load(args: &DataArgs) -> Result<Dataset, CliError> {
    let mut schema = CsvSchema::new(&args.biomarker, &args.outcome).covariates(args.covariates.iter().cloned());
    schema.missingness = args.missingness.clone();
    schema.measured = args.measured.clone();
    schema.weight = args.weight.clone();
    if let Some(r) = &args.outcome_range {
        let (lo, hi) = (r[0], r[1]);
        if !(lo < hi) {
            return Err(CliError::Usage(format!("outcome range needs lo < hi, got {lo},{hi}")));
        }
        schema.outcome_kind = OutcomeKind::BoundedContinuous { lo, hi };
    }
    if !args.input.exists() {
        return Err(CliError::Usage(format!("input file {} does not exist", args.input.display())));
    }
    Ok(load_csv(&args.input, &schema)?)
}

fn data_grid(args: &GridArgs, data: &Dataset) -> Result<ThresholdGrid, CliError> {
    let grid = match (&args.grid, &args.grid_quantiles) {
        (Some(v), None) => ThresholdGrid::explicit(v.clone())?,
        (None, Some(p)) => quantile_grid(data, p)?,
        (None, None) => return Err(CliError::Usage("one of --grid or --grid-quantiles is required".into())),
        (Some(_), Some(_)) => return Err(CliError::Usage("--grid and --grid-quantiles are mutually exclusive".into())),
    };
    grid.check_support(data, args.min_above)?;
    Ok(grid)
}

/// Writes to `path`, or stdout when absent.
fn emit<F>(path: Option<&Path>, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    match path {
        Some(p) => {
            let mut file = File::create(p).map_err(|e| CliError::Data(format!("cannot write {}: {e}", p.display())))?;
            f(&mut file)?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
        }
    }
    Ok(())
}

fn emit_json(path: Option<&Path>, value: &serde_json::Value) -> Result<(), CliError> {
    match path {
        None => Ok(()),
        Some(p) => emit(Some(p), |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        }),
    }
}

fn run_estimate(args: EstimateArgs) -> Result<(), CliError> {
    let tags = parse_tags(&args.estimator)?;
    let cfg = estimation_config(&args.nuisance)?;
    let data = load(&args.data)?;
    let grid = data_grid(&args.grid, &data)?;
    let curves = estimate_curve(&data, &grid, &cfg, &tags)?;
    let all: Vec<_> = curves.into_iter().flatten().collect();
    emit(args.output.as_deref(), |w| write_estimates_csv(&all, w))?;
    emit_json(args.json.as_deref(), &estimates_json(&all))
}

fn build_curve(args: &BandArgs) -> Result<ThresholdCurve, CliError> {
    check_alpha(args.alpha)?;
    let tag = parse_tags(std::slice::from_ref(&args.estimator))?[0];
    let cfg = estimation_config(&args.nuisance)?;
    let data = load(&args.data)?;
    let grid = data_grid(&args.grid, &data)?;
    let est = estimate_curve(&data, &grid, &cfg, &[tag])?.remove(0);
    Ok(ThresholdCurve::new(est, args.alpha, args.draws, args.seed)?)
}

fn run_bands(args: BandArgs) -> Result<(), CliError> {
    let curve = build_curve(&args)?;
    emit(args.output.as_deref(), |w| curve.write_csv(w))?;
    emit_json(args.json.as_deref(), &curve.to_json())
}

fn run_test(args: TestArgs) -> Result<(), CliError> {
    if !args.delta.is_finite() {
        return Err(CliError::Usage(format!("delta must be finite, got {}", args.delta)));
    }
    let curve = build_curve(&args.bands)?;
    let test = test_threshold_exists(&curve, args.delta)?;
    emit(args.bands.output.as_deref(), |w| {
        writeln!(w, "#schema=1")?;
        w.write_all(test.to_text().as_bytes())
    })?;
    emit_json(
        args.bands.json.as_deref(),
        &serde_json::json!({ "test": test, "curve": curve.to_json() }),
    )
}

fn family(
    design: &str,
    constant: Option<f64>,
    offset: Option<f64>,
    const2: Option<f64>,
    confounding: Option<f64>,
) -> Result<Family, CliError> {
    let mut fam = Family::from_name(design)?;
    match &mut fam {
        Family::Sim1 { constant: c, offset: o, .. } => {
            if let Some(v) = constant {
                *c = v;
            }
            if let Some(v) = offset {
                *o = v;
            }
        }
        Family::Sim2 { const2: c } => {
            if let Some(v) = const2 {
                *c = v;
            }
        }
        Family::Confounding { .. } => {
            if let Some(c) = confounding {
                fam = Family::confounding(c)?;
            }
        }
        _ => {}
    }
    let stray = match fam {
        Family::Sim1 { .. } => const2.map(|_| "--const2").or(confounding.map(|_| "--confounding")),
        Family::Sim2 { .. } => constant.map(|_| "--const").or(offset.map(|_| "--offset")).or(confounding.map(|_| "--confounding")),
        Family::Confounding { .. } => constant.map(|_| "--const").or(offset.map(|_| "--offset")).or(const2.map(|_| "--const2")),
        _ => constant
            .map(|_| "--const")
            .or(offset.map(|_| "--offset"))
            .or(const2.map(|_| "--const2"))
            .or(confounding.map(|_| "--confounding")),
    };
    if let Some(flag) = stray {
        return Err(CliError::Usage(format!("{flag} does not apply to design {design}")));
    }
    fam.validate()?;
    Ok(fam)
}

fn default_sim_grid(fam: &Family) -> GridChoice {
    match fam {
        Family::Sim1 { .. } | Family::Sim2 { .. } => GridChoice::Fixed((0..10).map(|j| j as f64 / 5.0).collect()),
        Family::BiasedSampling => GridChoice::SampleQuantiles(vec![0.0, 0.2, 0.4, 0.6, 0.8]),
        _ => GridChoice::SampleQuantiles((0..6).map(|j| j as f64 / 10.0).collect()),
    }
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, CliError> {
    names
        .iter()
        .map(|s| match s.trim() {
            "ipw_sr_tmle_untargeted" => Ok(Method::untargeted(EstimatorTag::IpwSrTmle)),
            other => EstimatorTag::parse(other)
                .map(Method::new)
                .ok_or_else(|| CliError::Usage(format!("unknown estimator `{s}`"))),
        })
        .collect()
}

fn run_simulate(args: SimulateArgs) -> Result<(), CliError> {
    check_alpha(args.alpha)?;
    if args.n == 0 || args.reps == 0 {
        return Err(CliError::Usage("--n and --reps must be positive".into()));
    }
    let fam = family(&args.design, args.constant, args.offset, args.const2, args.confounding)?;
    let biased = matches!(fam, Family::BiasedSampling);
    let methods = match &args.estimator {
        Some(names) => parse_methods(names)?,
        None if biased => vec![
            Method::new(EstimatorTag::IpwSrTmle),
            Method::untargeted(EstimatorTag::IpwSrTmle),
            Method::new(EstimatorTag::Donovan),
        ],
        None => vec![Method::new(EstimatorTag::SrTmle), Method::new(EstimatorTag::BinTmle), Method::new(EstimatorTag::Donovan)],
    };
    let grid = match (&args.grid.grid, &args.grid.grid_quantiles) {
        (Some(v), None) => GridChoice::Fixed(ThresholdGrid::explicit(v.clone())?.values().to_vec()),
        (None, Some(p)) => GridChoice::SampleQuantiles(p.clone()),
        (None, None) => default_sim_grid(&fam),
        (Some(_), Some(_)) => return Err(CliError::Usage("--grid and --grid-quantiles are mutually exclusive".into())),
    };
    let mut cfg = StudyConfig::new(fam, args.n, grid, methods, args.reps, args.seed);
    cfg.alpha = args.alpha;
    cfg.band_draws = args.draws;
    cfg.estimation = estimation_config(&args.nuisance)?;
    if biased && matches!(args.nuisance.ipw, IpwMode::Weights) {
        // generated case-control data carries no weight column
        cfg.estimation.sampling = WeightSource::Stratified;
    }
    let report = monte_carlo_study(&cfg)?;
    emit(args.output.as_deref(), |w| if args.long { report.write_long_csv(w) } else { report.write_csv(w) })?;
    let value = serde_json::to_value(&report).map_err(|e| CliError::Numerical(e.to_string()))?;
    emit_json(args.json.as_deref(), &value)
}

fn run_eff_loss(args: EffLossArgs) -> Result<(), CliError> {
    if args.n < 2 {
        return Err(CliError::Usage("--n must be at least 2".into()));
    }
    let mut fam = family(&args.design, args.constant, args.offset, args.const2, None)?;
    if args.no_missingness {
        match &mut fam {
            Family::Sim1 { missingness, .. } => *missingness = false,
            _ => return Err(CliError::Usage("--no-missingness applies to sim1 only".into())),
        }
    }
    let thresholds = match (&args.grid.grid, &args.grid.grid_quantiles) {
        (Some(v), None) => ThresholdGrid::explicit(v.clone())?.values().to_vec(),
        (None, None) => (0..10).map(|j| j as f64 / 5.0).collect(),
        (_, Some(_)) => return Err(CliError::Usage("eff-loss takes an explicit --grid".into())),
    };
    let loss = efficiency_loss(&fam, &thresholds, args.n, args.seed)?;
    emit(args.output.as_deref(), |w| loss.write_csv(w))?;
    let value = serde_json::to_value(&loss).map_err(|e| CliError::Numerical(e.to_string()))?;
    emit_json(args.json.as_deref(), &value)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Estimate(a) => run_estimate(a),
        Command::Bands(a) => run_bands(a),
        Command::TestThreshold(a) => run_test(a),
        Command::Simulate(a) => run_simulate(a),
        Command::EffLoss(a) => run_eff_loss(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).line());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}
