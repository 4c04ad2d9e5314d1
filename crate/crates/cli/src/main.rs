mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use maxent::closure::close_moments;
use maxent::datagen::{generate_dataset, load_dataset, save_dataset, write_atomic, SamplingSpec};
use maxent::experiments::{
    benchmark_speedup, kernel_comparison, realizability_scan, run_bgk, run_bimodal, run_bkw, run_noisy_bimodal,
    write_report, BenchmarkReport, BgkSpec, BiModalParams, BkwSpec, RealizabilityScanSpec, ScanFamily,
};
use maxent::gp::{train_model, FitOptions, GpModel, KernelFamily};
use maxent::med::{newton_solve, MaxEntDensity, MomentVector, SolverOptions};
use maxent::quadrature::{QuadratureRule, VelocityDomain};
use serde::Serialize;

use config::{parse_list, pick, resolve_seed, RunConfig};

/// Failure classes mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(maxent::Error),
}

impl From<maxent::Error> for CliError {
    fn from(e: maxent::Error) -> Self {
        CliError::Domain(e)
    }
}

#[derive(Parser)]
#[command(name = "maxent", version, about = "Maximum-entropy moment closures with Gaussian-process surrogates")]
struct Cli {
    /// Worker threads [default: MAXENT_THREADS, else all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; explicit flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log verbosity (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate standardized (moments, multipliers) training pairs
    GenData(GenDataArgs),
    /// Train one GP per multiplier on a dataset
    Train(TrainArgs),
    /// Close a raw moment vector with a trained model (JSON on stdout)
    Predict(PredictArgs),
    /// Solve for the maximum-entropy multipliers with Newton's method (JSON on stdout)
    Solve(SolveArgs),
    /// Run one of the closure test cases and write JSON/CSV reports
    Experiment(ExperimentArgs),
    /// Time GP prediction against the Newton solve
    Benchmark(BenchmarkArgs),
}

#[derive(clap::Args)]
struct DomainArgs {
    /// Lower velocity bound
    #[arg(long, default_value_t = -10.0, allow_negative_numbers = true)]
    v_min: f64,
    /// Upper velocity bound
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    v_max: f64,
    /// Gauss-Legendre order
    #[arg(long, default_value_t = 64)]
    quad_order: usize,
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Number of moments N
    #[arg(long)]
    n: Option<usize>,
    /// Number of pairs
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// RNG seed, or 'auto'
    #[arg(long)]
    seed: Option<String>,
    /// Half-width of the uniform multiplier box
    #[arg(long, default_value_t = 10.0)]
    b: f64,
    /// Tolerance on the standardized first two moments
    #[arg(long, default_value = "1e-10")]
    epsilon: f64,
    /// Draws allowed per accepted pair
    #[arg(long, default_value_t = 1_000_000)]
    max_rejections: usize,
    #[command(flatten)]
    domain: DomainArgs,
    /// Output CSV (metadata goes next to it with extension .meta.json)
    #[arg(long, default_value = "data.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Training dataset CSV
    #[arg(long)]
    data: Option<PathBuf>,
    /// Kernel family
    #[arg(long, default_value_t = KernelFamily::Rbf)]
    kernel: KernelFamily,
    /// Use only the first M pairs [default: all]
    #[arg(long)]
    m_train: Option<usize>,
    /// Optimizer starts per output
    #[arg(long, default_value_t = 4)]
    starts: usize,
    /// BFGS iterations per start
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// RNG seed for the optimizer starts, or 'auto'
    #[arg(long)]
    seed: Option<String>,
    /// Output model file
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PredictArgs {
    /// Trained model file
    #[arg(long)]
    model: Option<PathBuf>,
    /// Raw moments p_1..p_N, comma-separated
    #[arg(long, allow_hyphen_values = true)]
    moments: String,
}

#[derive(clap::Args)]
struct SolveArgs {
    /// Moments p_1..p_N, comma-separated
    #[arg(long, allow_hyphen_values = true)]
    moments: String,
    /// Number of moments N [default: length of --moments]
    #[arg(long)]
    n: Option<usize>,
    /// Seed of the random starting point
    #[arg(long, default_value = "0")]
    seed: String,
    #[command(flatten)]
    domain: DomainArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Bimodal,
    Noisy,
    Bgk,
    Bkw,
    Realizability,
    Kernels,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    D,
    U,
    S,
    All,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    /// Test case
    #[arg(value_enum)]
    kind: ExperimentKind,
    /// Trained model file (repeatable)
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// Report directory
    #[arg(long, default_value = "reports")]
    out: PathBuf,
    /// RNG seed (noisy, realizability, kernels), or 'auto'
    #[arg(long)]
    seed: Option<String>,
    /// Standard deviation of the multiplicative noise (noisy)
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Realizability family
    #[arg(long, value_enum, default_value_t = FamilyArg::All)]
    family: FamilyArg,
    /// Times for bgk [default: 0,3,8,20] or bkw [default: 5.8,6.5,7.5,8.5]
    #[arg(long)]
    times: Option<String>,
    /// BGK collision frequency
    #[arg(long, default_value_t = 0.25)]
    nu: f64,
    /// Training dataset (kernels)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset (kernels)
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Kernel families (kernels)
    #[arg(long, default_value = "rbf,matern12,matern32,matern52")]
    kernels: String,
    /// Training sizes (kernels)
    #[arg(long, default_value = "100,1000")]
    m_list: String,
    /// Optimizer starts per output (kernels)
    #[arg(long, default_value_t = 4)]
    starts: usize,
    /// BFGS iterations per start (kernels)
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
}

#[derive(clap::Args)]
struct BenchmarkArgs {
    /// Trained model file (repeatable)
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// Dataset supplying the test moments [default: generate with --seed]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of test moment vectors
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Timed passes
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// RNG seed for generated test moments and Newton starts, or 'auto'
    #[arg(long)]
    seed: Option<String>,
    /// Output timing JSON
    #[arg(long, default_value = "benchmark.json")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let threads = match cli.threads.or(config.threads) {
        Some(t) => Some(t),
        None => match std::env::var("MAXENT_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| CliError::Usage(format!("invalid MAXENT_THREADS '{v}'")))?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    let (_, sub) = matches.subcommand().expect("subcommand required");
    match cli.command {
        Command::GenData(a) => gen_data(a, sub, &config),
        Command::Train(a) => train(a, sub, &config),
        Command::Predict(a) => predict(a, &config),
        Command::Solve(a) => solve(a, sub, &config),
        Command::Experiment(a) => experiment(a, sub, &config),
        Command::Benchmark(a) => benchmark(a, sub, &config),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).map_err(maxent::Error::from)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // A closed reader (e.g. `| head`) is not an error.
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(maxent::Error::Io { path: PathBuf::from("<stdout>"), source: e }.into())
        }
        _ => Ok(()),
    }
}

fn resolve_rule(d: &DomainArgs, m: &ArgMatches, config: &RunConfig) -> Result<QuadratureRule<f64>, CliError> {
    let v_min = pick(m, "v_min", d.v_min, config.v_min);
    let v_max = pick(m, "v_max", d.v_max, config.v_max);
    let order = pick(m, "quad_order", d.quad_order, config.quad_order);
    Ok(QuadratureRule::new(VelocityDomain::new(v_min, v_max)?, order)?)
}

fn gen_data(a: GenDataArgs, m: &ArgMatches, config: &RunConfig) -> Result<(), CliError> {
    let n = a
        .n
        .or(config.n_moments)
        .ok_or_else(|| CliError::Usage("gen-data requires --n".into()))?;
    let seed = resolve_seed(a.seed.as_deref(), config.seed.as_ref())?;
    let rule = Arc::new(resolve_rule(&a.domain, m, config)?);
    let mut spec = SamplingSpec::new(n).with_epsilon(pick(m, "epsilon", a.epsilon, config.epsilon));
    spec.b = pick(m, "b", a.b, config.b);
    spec.max_rejections = pick(m, "max_rejections", a.max_rejections, config.max_rejections);
    spec.lambda_box = config.lambda_box.clone();
    if let Some(omega) = &config.omega_p {
        spec.omega_p = omega.clone();
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let count = pick(m, "count", a.count, config.count);
    let out = pick(m, "out", a.out, config.out.clone());
    let start = Instant::now();
    let ds = generate_dataset(count, &spec, &rule, seed)?;
    save_dataset(&ds, &out)?;
    log::info!(
        "wrote {} pairs to {} in {:.2} s (seed {seed})",
        ds.len(),
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train(a: TrainArgs, m: &ArgMatches, config: &RunConfig) -> Result<(), CliError> {
    let data = a
        .data
        .or(config.data.clone())
        .ok_or_else(|| CliError::Usage("train requires --data".into()))?;
    let seed = resolve_seed(a.seed.as_deref(), config.seed.as_ref())?;
    let mut ds = load_dataset(&data)?;
    if let Some(mt) = a.m_train.or(config.m_train) {
        if mt == 0 || mt > ds.len() {
            return Err(CliError::Usage(format!("--m-train {mt} must lie in 1..={}", ds.len())));
        }
        ds = ds.truncated(mt);
    }
    let opts = FitOptions {
        n_starts: pick(m, "starts", a.starts, config.starts),
        max_iters: pick(m, "max_iters", a.max_iters, config.max_iters),
        seed,
        ..FitOptions::default()
    };
    opts.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let kernel = pick(m, "kernel", a.kernel, config.kernel);
    let out = pick(m, "out", a.out, config.out.clone());
    let start = Instant::now();
    let model = train_model(&ds, kernel, &opts)?;
    model.save(&out)?;
    log::info!(
        "trained {kernel} model on {} pairs in {:.1} s, wrote {}",
        ds.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn load_model(path: Option<PathBuf>, config: &RunConfig) -> Result<GpModel, CliError> {
    let path = path
        .or_else(|| config.models.as_ref().and_then(|m| m.first().cloned()))
        .ok_or_else(|| CliError::Usage("--model is required".into()))?;
    Ok(GpModel::load(&path)?)
}

fn load_models(paths: Vec<PathBuf>, config: &RunConfig) -> Result<Vec<GpModel>, CliError> {
    let paths = if paths.is_empty() {
        config.models.clone().unwrap_or_default()
    } else {
        paths
    };
    if paths.is_empty() {
        return Err(CliError::Usage("at least one --model is required".into()));
    }
    paths.iter().map(|p| GpModel::load(p).map_err(CliError::from)).collect()
}

fn predict(a: PredictArgs, config: &RunConfig) -> Result<(), CliError> {
    let model = load_model(a.model, config)?;
    let values: Vec<f64> = parse_list(&a.moments, "moment")?;
    if values.len() != model.n_moments() {
        return Err(CliError::Usage(format!(
            "--moments has {} values but the model expects N = {}",
            values.len(),
            model.n_moments()
        )));
    }
    let raw = MomentVector::new(values)?;
    let result = close_moments(&model, &raw)?;
    let s = result.summary();
    print_json(&serde_json::json!({
        "lambda": s.lambda,
        "variance": s.variance,
        "reconstructed_moments": s.reconstructed_moments,
        "standardized_moments": s.standardized_moments,
        "mu": s.mu,
        "sigma": s.sigma,
        "out_of_box": s.out_of_box,
    }))
}

fn solve(a: SolveArgs, m: &ArgMatches, config: &RunConfig) -> Result<(), CliError> {
    let values: Vec<f64> = parse_list(&a.moments, "moment")?;
    if let Some(n) = a.n.or(config.n_moments) {
        if n != values.len() {
            return Err(CliError::Usage(format!(
                "--moments has {} values but --n is {n}",
                values.len()
            )));
        }
    }
    let seed = resolve_seed(Some(&a.seed), None)?;
    let rule = Arc::new(resolve_rule(&a.domain, m, config)?);
    let p = MomentVector::new(values)?;
    let start = Instant::now();
    let sol = newton_solve(&p, &rule, &SolverOptions::default(), seed)?;
    let seconds = start.elapsed().as_secs_f64();
    let moments = MaxEntDensity::new(sol.lambda.clone(), rule.clone())?.moments(p.n_moments())?;
    print_json(&serde_json::json!({
        "lambda": sol.lambda.values(),
        "iterations": sol.iterations,
        "gradient_norm": sol.gradient_norm,
        "moments": moments.values(),
        "seconds": seconds,
        "seed": seed,
    }))
}

fn model_refs(models: &[GpModel]) -> Vec<&GpModel> {
    models.iter().collect()
}

fn report_written(paths: Vec<PathBuf>) {
    for p in paths {
        log::info!("wrote {}", p.display());
    }
}

fn experiment(a: ExperimentArgs, m: &ArgMatches, config: &RunConfig) -> Result<(), CliError> {
    let out = pick(m, "out", a.out.clone(), config.out.clone());
    let times: Option<Vec<f64>> = a.times.as_deref().map(|t| parse_list(t, "time")).transpose()?;
    match a.kind {
        ExperimentKind::Bimodal => {
            let models = load_models(a.models, config)?;
            let report = run_bimodal(&model_refs(&models), &BiModalParams::paper_cases())?;
            report_written(write_report(&out, &report)?);
        }
        ExperimentKind::Noisy => {
            let seed = resolve_seed(a.seed.as_deref(), config.seed.as_ref())?;
            let models = load_models(a.models, config)?;
            let noise = pick(m, "noise", a.noise, config.noise);
            let report = run_noisy_bimodal(&model_refs(&models), &BiModalParams::paper_cases(), noise, seed)?;
            report_written(write_report(&out, &report)?);
        }
        ExperimentKind::Bgk => {
            let models = load_models(a.models, config)?;
            let mut spec = BgkSpec {
                nu: a.nu,
                ..BgkSpec::default()
            };
            if let Some(t) = times {
                spec.times = t;
            }
            spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            report_written(write_report(&out, &run_bgk(&model_refs(&models), &spec)?)?);
        }
        ExperimentKind::Bkw => {
            let models = load_models(a.models, config)?;
            let mut spec = BkwSpec::default();
            if let Some(t) = times {
                spec.times = t;
            }
            report_written(write_report(&out, &run_bkw(&model_refs(&models), &spec)?)?);
        }
        ExperimentKind::Realizability => {
            let seed = resolve_seed(a.seed.as_deref(), config.seed.as_ref())?;
            let models = load_models(a.models, config)?;
            let families = match a.family {
                FamilyArg::D => vec![ScanFamily::D],
                FamilyArg::U => vec![ScanFamily::U],
                FamilyArg::S => vec![ScanFamily::S],
                FamilyArg::All => vec![ScanFamily::D, ScanFamily::U, ScanFamily::S],
            };
            for f in families {
                let report = realizability_scan(&model_refs(&models), &RealizabilityScanSpec::paper(f), seed)?;
                report_written(write_report(&out, &report)?);
            }
        }
        ExperimentKind::Kernels => {
            let seed = resolve_seed(a.seed.as_deref(), config.seed.as_ref())?;
            let train_path = a
                .data
                .or(config.data.clone())
                .ok_or_else(|| CliError::Usage("kernels requires --data".into()))?;
            let test_path = a
                .test_data
                .or(config.test_data.clone())
                .ok_or_else(|| CliError::Usage("kernels requires --test-data".into()))?;
            let families: Vec<KernelFamily> = a
                .kernels
                .split(',')
                .map(|s| s.trim().parse::<KernelFamily>().map_err(|e| CliError::Usage(e.to_string())))
                .collect::<Result<_, _>>()?;
            let m_list: Vec<usize> = parse_list(&a.m_list, "training size")?;
            let opts = FitOptions {
                n_starts: pick(m, "starts", a.starts, config.starts),
                max_iters: pick(m, "max_iters", a.max_iters, config.max_iters),
                seed,
                ..FitOptions::default()
            };
            let train = load_dataset(&train_path)?;
            let test = load_dataset(&test_path)?;
            report_written(write_report(
                &out,
                &kernel_comparison(&train, &test, &families, &m_list, &opts)?,
            )?);
        }
    }
    Ok(())
}

fn test_moments(
    model: &GpModel,
    data: Option<&Path>,
    count: usize,
    seed: Option<u64>,
) -> Result<Vec<MomentVector<f64>>, CliError> {
    if let Some(path) = data {
        let ds = load_dataset(path)?;
        if ds.n_moments() == model.n_moments() {
            return Ok(ds.pairs.into_iter().take(count).map(|p| p.p).collect());
        }
    }
    let seed = seed.ok_or_else(|| {
        CliError::Usage(format!(
            "no test data with N = {}: pass a matching --data or --seed to generate it",
            model.n_moments()
        ))
    })?;
    let rule = Arc::new(model.rule()?);
    let ds = generate_dataset(count, &SamplingSpec::new(model.n_moments()), &rule, seed)?;
    Ok(ds.pairs.into_iter().map(|p| p.p).collect())
}

fn benchmark(a: BenchmarkArgs, m: &ArgMatches, config: &RunConfig) -> Result<(), CliError> {
    let models = load_models(a.models, config)?;
    let seed = match (a.seed.as_deref(), config.seed.as_ref()) {
        (None, None) => None,
        (s, c) => Some(resolve_seed(s, c)?),
    };
    let data = a.data.or(config.data.clone());
    let count = pick(m, "count", a.count, config.count);
    let repeats = pick(m, "repeats", a.repeats, config.repeats);
    let mut results = Vec::new();
    for model in &models {
        let moments = test_moments(model, data.as_deref(), count, seed)?;
        let r = benchmark_speedup(model, &moments, repeats, seed.unwrap_or(0))?;
        log::info!(
            "N={} M={}: GP {:.3e} s, Newton {:.3e} s, ratio {:.1}",
            r.n_moments,
            r.m_train,
            r.median_gp_seconds,
            r.median_newton_seconds,
            r.ratio
        );
        results.push(r);
    }
    let report = BenchmarkReport {
        name: "benchmark".into(),
        results,
    };
    let out = pick(m, "out", a.out, config.out.clone());
    let json = serde_json::to_string_pretty(&report).map_err(maxent::Error::from)?;
    write_atomic(&out, json.as_bytes())?;
    println!("{json}");
    Ok(())
}
