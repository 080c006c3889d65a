//! Batch command-line interface over the modeling library: fit from CSV,
//! recommend doses, generate scenario data, run the benchmark grid, export
//! the link surface for plotting, and bootstrap the index coefficients.
//!
//! Every subcommand is a pure function of its input files, flags, and seed;
//! the only exception is the wall-clock `fit_seconds` column in the optional
//! benchmark details file. Output files are written atomically, so an
//! interrupted run never leaves a truncated file at the target path.

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array1;

use simsl::doserule::{
    dose_grid, estimate_value_test, optimal_dose, ValueSmootherConfig, DEFAULT_DOSE_GRID,
};
use simsl::io;
use simsl::model::{bootstrap_beta_ci, fit_simsl, Dataset};
use simsl::simbench::{augment_quadratic, gen_scenario, run_benchmark, Augment, Scenario, ScenarioSpec};
use simsl::{Error, ErrorKind, Family, SimslConfig};

#[derive(Parser)]
#[command(
    name = "simsl",
    version,
    about = "Single-index dose-response surface models",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model from a CSV dataset and write it as JSON
    Fit(FitArgs),
    /// Recommend a dose for each row of a covariate CSV
    PredictDose(PredictDoseArgs),
    /// Generate a synthetic benchmark-scenario dataset
    Simulate(SimulateArgs),
    /// Run the simulation benchmark over scenario/size cells
    Benchmark(BenchmarkArgs),
    /// Export the fitted link surface on a lattice for plotting
    ExportSurface(ExportSurfaceArgs),
    /// Bootstrap confidence intervals for the index coefficients
    Bootstrap(BootstrapArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AugmentArg {
    /// Use the covariates as they are
    Raw,
    /// Append a squared copy of every non-binary covariate
    Quadratic,
}

impl From<AugmentArg> for Augment {
    fn from(a: AugmentArg) -> Augment {
        match a {
            AugmentArg::Raw => Augment::Raw,
            AugmentArg::Quadratic => Augment::Quadratic,
        }
    }
}

/// Flags shared by every subcommand that reads a training dataset.
#[derive(Args)]
struct DataArgs {
    /// Input CSV file with a header row
    #[arg(long)]
    data: PathBuf,
    /// Name of the outcome column
    #[arg(long)]
    outcome: String,
    /// Name of the dose column
    #[arg(long)]
    dose: String,
    /// Comma-separated covariate columns (default: every other column)
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Covariate preprocessing applied after reading
    #[arg(long, value_enum, default_value_t = AugmentArg::Raw)]
    augment: AugmentArg,
}

/// Flags shared by every subcommand that builds a fit configuration.
#[derive(Args)]
struct ConfigArgs {
    /// JSON file with fit settings; explicit flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Outcome family: gaussian, bernoulli, or poisson
    #[arg(long)]
    family: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output path for the model JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictDoseArgs {
    /// Fitted model JSON written by `fit`
    #[arg(long)]
    model: PathBuf,
    /// CSV file containing the model's covariate columns
    #[arg(long)]
    data: PathBuf,
    /// Number of grid points searched over the training dose range
    #[arg(long, default_value_t = DEFAULT_DOSE_GRID)]
    grid: usize,
    /// Output CSV of recommended doses, one row per input row
    #[arg(long)]
    out: PathBuf,
    /// Also estimate the value of the rule from outcomes in the data file,
    /// writing a small JSON report here; requires --outcome and --dose
    #[arg(long)]
    value_out: Option<PathBuf>,
    /// Outcome column for --value-out
    #[arg(long)]
    outcome: Option<String>,
    /// Observed-dose column for --value-out
    #[arg(long)]
    dose: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario number, 1 through 4
    #[arg(long)]
    scenario: u32,
    /// Training-set size
    #[arg(long)]
    n: usize,
    /// Covariate count (default: the scenario's standard dimension)
    #[arg(long)]
    p: Option<usize>,
    /// Residual standard deviation for the outcome noise
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    /// Covariate preprocessing applied before writing (default: raw; the
    /// usual protocol augments at fit time instead)
    #[arg(long, value_enum, default_value_t = AugmentArg::Raw)]
    augment: AugmentArg,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; columns are y, a, then the covariates
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Scenario number, 1 through 4; repeat the flag for several
    #[arg(long, required = true)]
    scenario: Vec<u32>,
    /// Training-set size; repeat the flag for several
    #[arg(long, required = true)]
    n: Vec<usize>,
    /// Replicates per (scenario, n) cell
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent test-set size used to score every replicate
    #[arg(long, default_value_t = 5000)]
    test_size: usize,
    /// Covariate count override applied to every cell
    #[arg(long)]
    p: Option<usize>,
    /// Residual standard deviation for the outcome noise
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    /// Covariate preprocessing (default: the scenario's standard protocol)
    #[arg(long, value_enum)]
    augment: Option<AugmentArg>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output CSV with one summary row per cell (deterministic)
    #[arg(long)]
    out: PathBuf,
    /// Optional per-replicate CSV; its fit_seconds column is wall-clock
    /// time and is excluded from the determinism guarantee
    #[arg(long)]
    details: Option<PathBuf>,
    /// Worker threads (default: all cores, or SIMSL_THREADS if set)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ExportSurfaceArgs {
    /// Fitted model JSON written by `fit`
    #[arg(long)]
    model: PathBuf,
    /// Lattice size as GxH (index by dose), e.g. 40x25
    #[arg(long, default_value = "40x40")]
    grid: String,
    /// Output CSV with columns u,a,g,mean
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of bootstrap replicates
    #[arg(long, default_value_t = 200)]
    n_boot: usize,
    /// Confidence level in (0, 1)
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV with one row per covariate
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores, or SIMSL_THREADS if set)
    #[arg(long)]
    threads: Option<usize>,
}

enum CliError {
    /// A problem with flags or files the caller can fix; exits 1.
    User(String),
    /// A failure inside the library; the exit code follows its kind.
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<simsl::io::IoError> for CliError {
    fn from(e: simsl::io::IoError) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<simsl::model::ModelError> for CliError {
    fn from(e: simsl::model::ModelError) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<simsl::doserule::DoseError> for CliError {
    fn from(e: simsl::doserule::DoseError) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<simsl::simbench::BenchError> for CliError {
    fn from(e: simsl::simbench::BenchError) -> Self {
        CliError::Lib(e.into())
    }
}

/// Parse argv and execute; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; clap picks the
            // stream and we pick the matching exit code.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error ({}): {e}", e.module());
            match e.kind() {
                ErrorKind::User => 1,
                ErrorKind::Numerical => 2,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Fit(args) => cmd_fit(args),
        Command::PredictDose(args) => cmd_predict_dose(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::ExportSurface(args) => cmd_export_surface(args),
        Command::Bootstrap(args) => cmd_bootstrap(args),
    }
}

/// Read the dataset named by the shared data flags and apply augmentation.
fn load_dataset(args: &DataArgs) -> Result<Dataset, CliError> {
    let data = io::read_dataset_csv(
        &args.data,
        &args.outcome,
        &args.dose,
        args.covariates.as_deref(),
    )?;
    match args.augment {
        AugmentArg::Raw => Ok(data),
        AugmentArg::Quadratic => {
            let (x, names) = augment_quadratic(data.x.view(), &data.x_names);
            Ok(Dataset::new(data.y, data.a, x, Some(names))?)
        }
    }
}

/// Build the fit configuration from the optional JSON file, then let
/// explicit flags override it.
fn load_config(args: &ConfigArgs) -> Result<SimslConfig, CliError> {
    let mut config = match &args.config {
        None => SimslConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::User(format!("--config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::User(format!("--config {}: {e}", path.display()))
            })?
        }
    };
    if let Some(name) = &args.family {
        config.family = parse_family(name)?;
    }
    Ok(config)
}

fn parse_family(name: &str) -> Result<Family, CliError> {
    Family::from_str(name).map_err(|_| {
        CliError::User(format!(
            "--family: unknown family '{name}'; supported families are gaussian, bernoulli, poisson"
        ))
    })
}

/// Bound the rayon pool by --threads, or by SIMSL_THREADS when the flag is
/// absent. Only the first call in a process takes effect.
fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    let n = match threads {
        Some(t) => Some(t),
        None => match std::env::var("SIMSL_THREADS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                CliError::User(format!("SIMSL_THREADS: cannot parse '{v}' as a thread count"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::User("--threads must be at least 1".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let data = load_dataset(&args.data)?;
    let config = load_config(&args.config)?;
    let model = fit_simsl(&data, &config)?;
    io::write_model_json(&model, &args.out)?;
    println!(
        "fit: {} rows, {} covariates, family {}; converged {} after {} iterations; wrote {}",
        data.n(),
        data.p(),
        model.family,
        model.converged,
        model.outer_iterations,
        args.out.display()
    );
    Ok(())
}

fn cmd_predict_dose(args: PredictDoseArgs) -> Result<(), CliError> {
    if args.grid == 0 {
        return Err(CliError::User("--grid must be at least 1".into()));
    }
    let model = io::read_model_json(&args.model)?;
    let x = io::read_columns_csv(&args.data, &model.column_names)?;
    let grid = dose_grid(model.a_range, args.grid);
    let doses = optimal_dose(&model, x.view(), Some(grid.view()))?;
    io::write_doses_csv(&args.out, doses.view())?;
    println!("predict-dose: {} rows; wrote {}", doses.len(), args.out.display());

    if let Some(value_out) = &args.value_out {
        let outcome = args.outcome.as_deref().ok_or_else(|| {
            CliError::User("--value-out requires --outcome to locate test outcomes".into())
        })?;
        let dose = args.dose.as_deref().ok_or_else(|| {
            CliError::User("--value-out requires --dose to locate observed doses".into())
        })?;
        let test = io::read_dataset_csv(&args.data, outcome, dose, Some(&model.column_names))?;
        let estimate = estimate_value_test(&test, doses.view(), &ValueSmootherConfig::default())?;
        let report = serde_json::json!({
            "value": estimate.value,
            "degenerate_doses": estimate.degenerate_doses,
            "method": "smoother",
            "grid_size": args.grid,
            "rows": test.n(),
        });
        let mut bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
        bytes.push(b'\n');
        io::write_atomic(value_out, &bytes)?;
        println!(
            "predict-dose: estimated value {}; wrote {}",
            estimate.value,
            value_out.display()
        );
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let scenario = Scenario::from_id(args.scenario)?;
    let mut spec = ScenarioSpec::new(scenario, args.n);
    spec.p = args.p;
    spec.noise_sd = args.noise_sd;
    let generated = gen_scenario(&spec, args.seed, [scenario.id() as u64, args.n as u64, 0])?;
    let data = match args.augment {
        AugmentArg::Raw => generated.data,
        AugmentArg::Quadratic => {
            let (x, names) = augment_quadratic(generated.data.x.view(), &generated.data.x_names);
            Dataset::new(generated.data.y, generated.data.a, x, Some(names))?
        }
    };
    io::write_dataset_csv(&args.out, &data, "y", "a")?;
    println!(
        "simulate: scenario {}, {} rows, {} covariate columns; wrote {}",
        args.scenario,
        data.n(),
        data.p(),
        args.out.display()
    );
    Ok(())
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<(), CliError> {
    init_threads(args.threads)?;
    let config = load_config(&args.config)?;
    let mut specs = Vec::new();
    for id in &args.scenario {
        let scenario = Scenario::from_id(*id)?;
        for n in &args.n {
            let mut spec = ScenarioSpec::new(scenario, *n);
            spec.p = args.p;
            spec.noise_sd = args.noise_sd;
            if let Some(augment) = args.augment {
                spec.augment = augment.into();
            }
            specs.push(spec);
        }
    }
    let cells = run_benchmark(&specs, args.replicates, args.seed, args.test_size, &config)?;
    io::write_atomic(&args.out, io::benchmark_summary_csv(&cells).as_bytes())?;
    if let Some(details) = &args.details {
        io::write_atomic(details, io::benchmark_details_csv(&cells).as_bytes())?;
    }
    for cell in &cells {
        println!(
            "benchmark: scenario {} n {}: mean value {:.4}, sd {:.4}, {} failures",
            cell.scenario, cell.n, cell.mean_value, cell.sd_value, cell.failures
        );
    }
    println!("benchmark: wrote {}", args.out.display());
    Ok(())
}

/// Parse a GxH lattice size such as "40x25".
fn parse_lattice(text: &str) -> Result<(usize, usize), CliError> {
    let bad = || {
        CliError::User(format!(
            "--grid: expected GxH with both sides at least 2, e.g. 40x25; got '{text}'"
        ))
    };
    let (g, h) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let g: usize = g.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if g < 2 || h < 2 {
        return Err(bad());
    }
    Ok((g, h))
}

fn cmd_export_surface(args: ExportSurfaceArgs) -> Result<(), CliError> {
    let (num_u, num_a) = parse_lattice(&args.grid)?;
    let model = io::read_model_json(&args.model)?;
    let u_grid = linspace(model.u_range, num_u);
    let a_grid = linspace(model.a_range, num_a);
    let g = model.surface.g_lattice(u_grid.view(), a_grid.view());
    let mut out = String::from("u,a,g,mean\n");
    for (i, u) in u_grid.iter().enumerate() {
        for (j, a) in a_grid.iter().enumerate() {
            let mean = model.family.inverse_link(model.surface.intercept + g[[i, j]]);
            out.push_str(&format!("{u},{a},{},{mean}\n", g[[i, j]]));
        }
    }
    io::write_atomic(&args.out, out.as_bytes())?;
    println!(
        "export-surface: {} x {} lattice; wrote {}",
        num_u,
        num_a,
        args.out.display()
    );
    Ok(())
}

fn linspace(range: (f64, f64), size: usize) -> Array1<f64> {
    Array1::linspace(range.0, range.1, size)
}

fn cmd_bootstrap(args: BootstrapArgs) -> Result<(), CliError> {
    init_threads(args.threads)?;
    let data = load_dataset(&args.data)?;
    let config = load_config(&args.config)?;
    let ci = bootstrap_beta_ci(&data, &config, args.n_boot, args.level, args.seed)?;
    let mut out = String::from("covariate,estimate,se,lower,upper\n");
    for j in 0..data.p() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            data.x_names[j], ci.estimate[j], ci.se[j], ci.lower[j], ci.upper[j]
        ));
    }
    io::write_atomic(&args.out, out.as_bytes())?;
    println!(
        "bootstrap: {} replicates, {} failures, level {}; wrote {}",
        ci.n_boot,
        ci.failures,
        ci.level,
        args.out.display()
    );
    Ok(())
}
