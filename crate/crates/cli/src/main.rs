//! Command-line front end: frames, simulations, bounds, diagnostics,
//! mitigations and experiment presets.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use ncdp_core::analysis::{beta_histogram, collapse_report, write_histogram, DEFAULT_COSINE_TOLERANCE};
use ncdp_core::bounds::{
    deterministic_shift_bound, gd_error_bound, noisygd_error_bound, pca_sample_complexity, perfect_nc_error,
    projected_multi_iter_bound, random_init_error, table1_sample_complexity, BoundQuery, BoundResult, Table1Setting,
};
use ncdp_core::geometry::{make_etf, EtfFrame};
use ncdp_core::harness::{
    mc_error, run_preset, FrameSpec, Mitigation, Preset, PresetOptions, PrivacySpec, Scenario, TestNoise,
};
use ncdp_core::mitigations::{fit_projection, normalize_dataset, project_dataset, with_beta0, ProjectionMethod};
use ncdp_core::par::Execution;
use ncdp_core::privacy::dp_to_zcdp;
use ncdp_core::synth::{load_features, sample_dataset, write_features, ShiftModel};
use ncdp_core::trainer::{HeadKind, Loss};

#[derive(Parser)]
#[command(name = "ncdp", version, about = "Private linear probing on collapsed features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a simplex equiangular tight frame and print it as JSON.
    Etf(EtfArgs),
    /// Estimate misclassification error of one scenario by Monte Carlo.
    Simulate(Box<SimulateArgs>),
    /// Evaluate an error bound or sample complexity.
    Bounds(Box<BoundsArgs>),
    /// Collapse diagnostics for a feature CSV.
    Analyze(AnalyzeArgs),
    /// Fit a projection or normalize a feature CSV.
    Mitigate(MitigateArgs),
    /// Run an experiment preset and write CSV and JSON results.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct EtfArgs {
    #[arg(long)]
    p: usize,
    #[arg(long = "K")]
    k: usize,
    /// Use the standard-basis construction (no randomness).
    #[arg(long)]
    canonical: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainShiftArg {
    None,
    Stochastic,
    Offset,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestShiftArg {
    None,
    Stochastic,
    Gaussian,
    Offset,
    Adversarial,
}

#[derive(Clone, Copy, ValueEnum)]
enum MitigationArg {
    None,
    Pca,
    ClassMean,
    Normalize,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    CrossEntropy,
    Squared,
}

#[derive(Args)]
#[group(id = "privacy", multiple = true)]
struct PrivacyArgs {
    #[arg(long, conflicts_with_all = ["epsilon", "nonprivate"])]
    rho: Option<f64>,
    #[arg(long, requires = "delta", conflicts_with = "nonprivate")]
    epsilon: Option<f64>,
    #[arg(long, requires = "epsilon")]
    delta: Option<f64>,
    /// Train without noise.
    #[arg(long)]
    nonprivate: bool,
}

impl PrivacyArgs {
    fn spec(&self) -> Option<PrivacySpec> {
        if self.nonprivate {
            Some(PrivacySpec::nonprivate())
        } else if let Some(rho) = self.rho {
            Some(PrivacySpec::zcdp(rho))
        } else {
            Some(PrivacySpec::dp(self.epsilon?, self.delta?))
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON; flags below are ignored except --seed and --trials.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    p: usize,
    #[arg(long = "K", default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    canonical: bool,
    #[command(flatten)]
    privacy: PrivacyArgs,
    /// Imbalance level.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum, default_value = "none")]
    train_shift: TrainShiftArg,
    #[arg(long, default_value_t = 0.0)]
    train_beta: f64,
    #[arg(long, value_enum, default_value = "none")]
    test_shift: TestShiftArg,
    /// Magnitude of the test shift (variance for `gaussian`).
    #[arg(long, default_value_t = 0.0)]
    test_beta: f64,
    #[arg(long, value_enum, default_value = "none")]
    mitigation: MitigationArg,
    /// Projection rank for pca and class-mean.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long, value_enum, default_value = "cross-entropy")]
    loss: LossArg,
    /// Use the single-vector head (K = 2 only).
    #[arg(long)]
    binary: bool,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write one training draw of the scenario as CSV.
    #[arg(long)]
    dump_dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    /// A summary-table setting (perfect-NC, approx-NC, ...) or an evaluator:
    /// gd, noisygd, deterministic, projected, perfect-collapse, pca, random-init.
    #[arg(long)]
    setting: String,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long = "K", default_value_t = 2)]
    k: usize,
    #[arg(long = "K0")]
    k0: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.0)]
    beta0: f64,
    #[arg(long, default_value_t = 0.0)]
    beta_tilde: f64,
    #[arg(long, conflicts_with = "epsilon")]
    rho: Option<f64>,
    #[arg(long, requires = "delta")]
    epsilon: Option<f64>,
    #[arg(long, requires = "epsilon")]
    delta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "R")]
    radius: Option<f64>,
    #[arg(long = "k")]
    steps: Option<u32>,
    #[arg(long = "t")]
    tail: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Sensitivity for random-init.
    #[arg(long = "G", default_value_t = 1.0)]
    g: f64,
    #[arg(long)]
    independent_coordinates: bool,
    /// Evaluate the non-private column of the summary table.
    #[arg(long)]
    nonprivate: bool,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Scale every row to unit norm before analysis.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = DEFAULT_COSINE_TOLERANCE)]
    cosine_tolerance: f64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Histogram CSV path.
    #[arg(long, default_value = "beta_histogram.csv")]
    histogram: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Pca,
    ClassMean,
    Normalize,
}

#[derive(Args)]
struct MitigateArgs {
    /// Features to transform.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    r: Option<usize>,
    /// Public features the projection is fitted on.
    #[arg(long)]
    public: Option<PathBuf>,
    /// Frame JSON used to measure the projection's deviation.
    #[arg(long)]
    frame: Option<PathBuf>,
    /// Transformed features CSV.
    #[arg(long)]
    features_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Uniform,
    Gaussian,
    Adversarial,
}

#[derive(Args)]
struct ReproduceArgs {
    /// fig4a, fig5, table1-grid or bound-dominance.
    preset: String,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Comma-separated dimensions for the figure presets.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Comma-separated projection ranks for fig5.
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "uniform")]
    test_noise: NoiseArg,
    /// Run trials on one thread.
    #[arg(long)]
    sequential: bool,
}

enum Failure {
    Usage(clap::Error),
    Runtime(Box<dyn std::error::Error>),
}

impl<E: std::error::Error + 'static> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(Box::new(e))
    }
}

type Outcome = Result<(), Failure>;

fn usage(kind: ErrorKind, message: &str) -> Failure {
    Failure::Usage(Cli::command().error(kind, message))
}

fn require_seed(seed: Option<u64>, what: &str) -> Result<u64, Failure> {
    seed.ok_or_else(|| usage(ErrorKind::MissingRequiredArgument, &format!("{what} needs --seed")))
}

fn emit_json(value: &impl serde::Serialize, out: Option<&Path>) -> Outcome {
    let text = serde_json::to_string(value)?;
    match out {
        Some(path) => {
            let mut f = BufWriter::new(File::create(path)?);
            writeln!(f, "{text}")?;
            f.flush()?;
        }
        None => match writeln!(io::stdout().lock(), "{text}") {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {}
            r => r?,
        },
    }
    Ok(())
}

fn etf(a: EtfArgs) -> Outcome {
    let seed = if a.canonical { a.seed } else { Some(require_seed(a.seed, "a non-canonical frame")?) };
    let frame = make_etf(a.p, a.k, seed, a.canonical)?;
    emit_json(&frame, a.out.as_deref())
}

fn simulate(a: SimulateArgs) -> Outcome {
    let seed = require_seed(a.seed, "simulate")?;
    let mut scenario = match &a.scenario {
        Some(path) => serde_json::from_reader::<_, Scenario>(File::open(path)?)?,
        None => scenario_from_flags(&a)?,
    };
    scenario.seed = seed;
    if let Some(t) = a.trials {
        scenario.trials = t;
    }
    if let Some(path) = &a.dump_dataset {
        let frame = scenario.frame.build(seed)?;
        let (train_shift, _) = scenario.resolve_shifts(&frame)?;
        let weights = match (&scenario.class_weights, scenario.alpha) {
            (Some(w), _) => Some(w.clone()),
            (None, Some(alpha)) => Some(ncdp_core::harness::alpha_weights(frame.k(), alpha)?),
            _ => None,
        };
        let data = sample_dataset(&frame, scenario.n, weights.as_deref(), &train_shift, seed)?;
        write_features(&data, BufWriter::new(File::create(path)?))?;
    }
    let result = mc_error(&scenario)?;
    emit_json(&result, a.out.as_deref())
}

fn scenario_from_flags(a: &SimulateArgs) -> Result<Scenario, Failure> {
    let privacy = a.privacy.spec().ok_or_else(|| {
        usage(ErrorKind::MissingRequiredArgument, "give --rho, --epsilon with --delta, or --nonprivate")
    })?;
    let mut s = Scenario::perfect(a.p, a.k, a.n, privacy, a.trials.unwrap_or(200), 0);
    s.frame = FrameSpec { p: a.p, k: a.k, canonical: a.canonical, seed: None };
    s.alpha = a.alpha;
    s.train_shift = match a.train_shift {
        TrainShiftArg::None => ShiftModel::none(),
        TrainShiftArg::Stochastic => ShiftModel::stochastic(a.train_beta),
        TrainShiftArg::Offset => ShiftModel { offset_vector: None, ..ShiftModel::offset(vec![], a.train_beta) },
    };
    s.test_shift = match a.test_shift {
        TestShiftArg::None => ShiftModel::none(),
        TestShiftArg::Stochastic => ShiftModel::stochastic(a.test_beta),
        TestShiftArg::Gaussian => ShiftModel::gaussian(a.test_beta),
        TestShiftArg::Offset => {
            // A test offset reuses the training offset when both are set.
            let beta = if matches!(a.train_shift, TrainShiftArg::Offset) { a.train_beta } else { a.test_beta };
            ShiftModel { offset_vector: None, ..ShiftModel::offset(vec![], beta) }
        }
        TestShiftArg::Adversarial => ShiftModel::adversarial(a.test_beta),
    };
    let rank = || a.r.ok_or_else(|| usage(ErrorKind::MissingRequiredArgument, "projection needs --r"));
    s.mitigation = match a.mitigation {
        MitigationArg::None => Mitigation::None,
        MitigationArg::Pca => Mitigation::Pca { r: rank()? },
        MitigationArg::ClassMean => Mitigation::ClassMean { r: rank()? },
        MitigationArg::Normalize => Mitigation::Normalize,
    };
    s.train.loss = match a.loss {
        LossArg::CrossEntropy => Loss::CrossEntropy,
        LossArg::Squared => Loss::Squared,
    };
    if a.binary {
        s.train.head = HeadKind::Binary;
    }
    Ok(s)
}

fn bounds(a: BoundsArgs) -> Outcome {
    let rho = match (a.rho, a.epsilon, a.delta) {
        (Some(r), _, _) => Some(r),
        (None, Some(e), Some(d)) => Some(dp_to_zcdp(e, d)?),
        _ => None,
    };
    let q = BoundQuery {
        n: a.n,
        p: a.p,
        k: a.k,
        k0: a.k0,
        beta: a.beta,
        beta_tilde: a.beta_tilde,
        beta0: a.beta0,
        rho,
        gamma: a.gamma,
        alpha: a.alpha,
        radius: a.radius,
        steps: a.steps,
        tail: a.tail,
        sigma: a.sigma,
        independent_coordinates: a.independent_coordinates,
    };
    let result: BoundResult = match a.setting.as_str() {
        "gd" => gd_error_bound(&q)?,
        "noisygd" => noisygd_error_bound(&q)?,
        "deterministic" => deterministic_shift_bound(&q)?,
        "projected" => projected_multi_iter_bound(&q)?,
        "pca" => pca_sample_complexity(&q)?,
        "perfect-collapse" => {
            let sigma = match (a.sigma, rho) {
                (Some(s), _) => s,
                (None, Some(r)) => 1.0 / (2.0 * r).sqrt(),
                (None, None) => {
                    return Err(usage(ErrorKind::MissingRequiredArgument, "perfect-collapse needs --sigma or --rho"))
                }
            };
            perfect_nc_error(a.n, a.k, a.k0, sigma)?
        }
        "random-init" => {
            let seed = require_seed(a.seed, "random-init")?;
            let rho = rho.ok_or_else(|| usage(ErrorKind::MissingRequiredArgument, "random-init needs --rho"))?;
            random_init_error(a.n, rho, a.g, a.draws, seed)?
        }
        other => {
            let setting: Table1Setting = other.parse()?;
            table1_sample_complexity(setting, !a.nonprivate, &q)?
        }
    };
    emit_json(&result, a.out.as_deref())
}

fn analyze(a: AnalyzeArgs) -> Outcome {
    let data = load_features(&a.input, a.normalize)?;
    let report = collapse_report(&data, a.cosine_tolerance)?;
    let rows = beta_histogram(&report, a.bins)?;
    write_histogram(&rows, BufWriter::new(File::create(&a.histogram)?))?;
    emit_json(&report, a.out.as_deref())
}

fn mitigate(a: MitigateArgs) -> Outcome {
    let data = load_features(&a.input, false)?;
    let (features, summary) = match a.method {
        MethodArg::Normalize => {
            let nd = normalize_dataset(&data)?;
            let summary = serde_json::json!({
                "method": "normalize",
                "sensitivity": nd.sensitivity,
                "sensitivity_source": nd.source,
                "mean": nd.mean,
            });
            (nd.data, summary)
        }
        MethodArg::Pca | MethodArg::ClassMean => {
            let r = a.r.ok_or_else(|| usage(ErrorKind::MissingRequiredArgument, "projection needs --r"))?;
            let public_path = a
                .public
                .as_ref()
                .ok_or_else(|| usage(ErrorKind::MissingRequiredArgument, "projection needs --public features"))?;
            let public = load_features(public_path, false)?;
            let method = if matches!(a.method, MethodArg::Pca) { ProjectionMethod::Pca } else { ProjectionMethod::ClassMean };
            let mut proj = fit_projection(&public, method, r)?;
            if let Some(path) = &a.frame {
                let frame = EtfFrame::from_json(&std::fs::read_to_string(path)?)?;
                proj = with_beta0(proj, &frame)?;
            }
            let projected = project_dataset(&data, &proj)?;
            let summary = serde_json::json!({ "projection": proj, "sensitivity": projected.sensitivity });
            (projected.data, summary)
        }
    };
    if let Some(path) = &a.features_out {
        write_features(&features, BufWriter::new(File::create(path)?))?;
    }
    emit_json(&summary, a.out.as_deref())
}

fn reproduce(a: ReproduceArgs) -> Outcome {
    let preset: Preset = a.preset.parse()?;
    let seed = require_seed(a.seed, "reproduce")?;
    let opts = PresetOptions {
        seed,
        trials: a.trials,
        dims: a.dims,
        ranks: a.ranks,
        test_noise: match a.test_noise {
            NoiseArg::Uniform => TestNoise::Uniform,
            NoiseArg::Gaussian => TestNoise::Gaussian,
            NoiseArg::Adversarial => TestNoise::Adversarial,
        },
        grid: None,
        out_dir: Some(a.out),
        execution: if a.sequential { Execution::Sequential } else { Execution::default() },
    };
    let report = run_preset(preset, &opts)?;
    let summary = serde_json::json!({ "preset": preset.name(), "files": report.files, "notes": report.notes });
    emit_json(&summary, None)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Etf(a) => etf(a),
        Command::Simulate(a) => simulate(*a),
        Command::Bounds(a) => bounds(*a),
        Command::Analyze(a) => analyze(a),
        Command::Mitigate(a) => mitigate(a),
        Command::Reproduce(a) => reproduce(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(io::stderr(), "error: {e}");
            ExitCode::from(2)
        }
    }
}
