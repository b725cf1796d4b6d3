//! Command-line entry point: `train`, `compare`, `verify-theory`,
//! `grid-search`, `demo-synth`, and `report`.
//!
//! Exit codes: 0 success, 1 usage, 2 data/IO, 3 numerical failure. All
//! artifacts land under `--out` and are written atomically. The env var
//! `TAILGUARD_THREADS` caps worker parallelism for `compare` and
//! `grid-search` fan-out.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    apply_scaler, fit_scaler, load_csv, make_windows, split, DatasetError, EraseParams, Freq,
    SampleWindow, SplitSpec,
};
use crate::model::{ModelError, ModelKind};
use crate::sampler::{
    GaussianWeightParams, InfoBatchParams, LossStats, SamplerError,
};
use crate::theory::{verify_theorem1, LossDensity, TheoryError, VerifySettings};
use crate::trainer::{
    epochs_to_target, grid_search, train, write_atomic, write_run_artifacts, EpochRecord,
    ModelSpec, SamplerKind, TrainConfig, TrainOutcome, TrainSetup, TrainerError,
    RUN_SCHEMA_VERSION,
};

/// Every failure a subcommand can surface, bucketed by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1: bad flags or flag combinations.
    Usage(String),
    /// Exit 2: missing/malformed inputs or failed writes.
    Data(String),
    /// Exit 3: NaN/∞/overflow during computation.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Data(msg) | CliError::Numerical(msg) => {
                write!(f, "{msg}")
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<DatasetError> for CliError {
    fn from(err: DatasetError) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(err: SamplerError) -> Self {
        match err {
            SamplerError::NonFinite { .. } | SamplerError::ZeroWeightSum => {
                CliError::Numerical(err.to_string())
            }
            SamplerError::InvalidParam { .. } => CliError::Usage(err.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(err: ModelError) -> Self {
        match err {
            ModelError::Io(_) | ModelError::Json(_) => CliError::Data(err.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(err: TrainerError) -> Self {
        match err {
            TrainerError::Config { .. } => CliError::Usage(err.to_string()),
            TrainerError::Data(_)
            | TrainerError::Io(_)
            | TrainerError::Json(_)
            | TrainerError::Csv(_) => CliError::Data(err.to_string()),
            TrainerError::NonFinite { .. } => CliError::Numerical(err.to_string()),
            TrainerError::Model(inner) => inner.into(),
            TrainerError::Sampler(inner) => inner.into(),
        }
    }
}

impl From<TheoryError> for CliError {
    fn from(err: TheoryError) -> Self {
        match err {
            TheoryError::InvalidParam { .. } | TheoryError::Parse(_) => {
                CliError::Usage(err.to_string())
            }
            TheoryError::Sampler(inner) => inner.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError::Data(err.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn parse_finite(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !v.is_finite() {
        return Err(format!("'{s}' is not finite"));
    }
    Ok(v)
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    let v = parse_finite(s)?;
    if v <= 0.0 {
        return Err(format!("'{s}' must be > 0"));
    }
    Ok(v)
}

fn parse_unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v = parse_finite(s)?;
    if !(0.0..1.0).contains(&v) {
        return Err(format!("'{s}' must be in [0, 1)"));
    }
    Ok(v)
}

fn parse_lr(s: &str) -> std::result::Result<f64, String> {
    let v = parse_finite(s)?;
    if v < 0.0 {
        return Err(format!("'{s}' must be ≥ 0"));
    }
    Ok(v)
}

fn parse_nonzero_usize(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("'{s}' is not a count"))?;
    if v == 0 {
        return Err(format!("'{s}' must be ≥ 1"));
    }
    Ok(v)
}

fn parse_split(s: &str) -> std::result::Result<SplitSpec, String> {
    SplitSpec::from_str(s).map_err(|e| e.to_string())
}

fn parse_freq(s: &str) -> std::result::Result<Freq, String> {
    Freq::from_str(s).map_err(|e| e.to_string())
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::from_str(s).map_err(|e| e.to_string())
}

fn parse_density(s: &str) -> std::result::Result<LossDensity, String> {
    LossDensity::from_str(s).map_err(|e| e.to_string())
}

/// A 2-D point given as `x,y`.
#[derive(Debug, Clone, Copy)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

fn parse_point(s: &str) -> std::result::Result<Point2, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("'{s}' is not an x,y point"));
    }
    Ok(Point2 { x: parse_finite(parts[0].trim())?, y: parse_finite(parts[1].trim())? })
}

#[derive(Debug, Parser)]
#[command(
    name = "tailguard",
    version,
    about = "Loss-weighted resampling for time-series forecasting, with a numerical tail-theory lab"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one forecaster and write run.json plus weight/histogram snapshots.
    Train(TrainArgs),
    /// Train once per sampler on identical data and seed; write a side-by-side table.
    Compare(CompareArgs),
    /// Integrate truncated exponential moments and classify raw vs reweighted tails.
    VerifyTheory(VerifyArgs),
    /// Train one full run per (mu, sigma) cell and write the MSE surface.
    GridSearch(GridArgs),
    /// Two-cluster logistic demo: per-point losses and their Gaussian weights.
    DemoSynth(DemoArgs),
    /// Re-emit plot-ready CSVs (curves, histogram, table, surface) from a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV with a header row; a leading date column is auto-detected.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_nonzero_usize)]
    lookback: usize,
    #[arg(long, value_parser = parse_nonzero_usize)]
    horizon: usize,
    /// `months:12,4,4` or `frac:0.7,0.1,0.2`.
    #[arg(long, default_value = "frac:0.7,0.1,0.2", value_parser = parse_split)]
    split: SplitSpec,
    /// Row cadence, `hourly` or `15min`; sets rows-per-month for month splits.
    #[arg(long, default_value = "hourly", value_parser = parse_freq)]
    freq: Freq,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// `linear` or `mlp`.
    #[arg(long, default_value = "linear", value_parser = parse_model)]
    model: ModelKind,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    epochs: u32,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    patience: u32,
    #[arg(long, default_value_t = 128, value_parser = parse_nonzero_usize)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4, value_parser = parse_lr)]
    lr: f64,
    /// TMSE smoothing factor in [0, 1).
    #[arg(long, default_value_t = 0.9, value_parser = parse_unit_interval)]
    tau: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Re-score every training sample at epoch end (exact weight stats).
    #[arg(long)]
    full_loss_pass: bool,
    /// Random-erase augmentation (p=0.5, erased fraction 0.05..0.2).
    #[arg(long)]
    augment: bool,
}

#[derive(Debug, Args)]
struct SamplerArgs {
    /// `gaussian`, `uniform`, `infobatch`, or `infobatch:<ratio>`.
    #[arg(long, default_value = "gaussian")]
    sampler: Vec<String>,
    /// Gaussian weight bias (gaussian sampler only).
    #[arg(long, allow_hyphen_values = true, value_parser = parse_finite)]
    mu: Option<f64>,
    /// Gaussian weight spread, > 0 (gaussian sampler only).
    #[arg(long, value_parser = parse_positive)]
    sigma: Option<f64>,
    /// InfoBatch prune probability in [0, 1) (infobatch sampler only).
    #[arg(long, value_parser = parse_unit_interval)]
    prune_ratio: Option<f64>,
}

impl SamplerArgs {
    /// Applies the loose flags to each sampler token of the matching kind.
    fn resolve(&self) -> Result<Vec<SamplerKind>> {
        let has_gaussian = self.sampler.iter().any(|t| t == "gaussian");
        let has_bare_infobatch = self.sampler.iter().any(|t| t == "infobatch");
        if (self.mu.is_some() || self.sigma.is_some()) && !has_gaussian {
            return Err(CliError::Usage(
                "--mu/--sigma apply only to `--sampler gaussian`".to_owned(),
            ));
        }
        if self.prune_ratio.is_some() && !has_bare_infobatch {
            return Err(CliError::Usage(
                "--prune-ratio applies only to `--sampler infobatch`".to_owned(),
            ));
        }
        self.sampler
            .iter()
            .map(|token| match token.as_str() {
                "gaussian" => {
                    let params =
                        GaussianWeightParams::new(self.mu.unwrap_or(0.0), self.sigma.unwrap_or(1.0))
                            .map_err(|e| CliError::Usage(e.to_string()))?;
                    Ok(SamplerKind::Gaussian(params))
                }
                "infobatch" => {
                    let params = InfoBatchParams::standard(self.prune_ratio.unwrap_or(0.5))
                        .map_err(|e| CliError::Usage(e.to_string()))?;
                    Ok(SamplerKind::InfoBatch(params))
                }
                other => other.parse::<SamplerKind>().map_err(|e| CliError::Usage(e.to_string())),
            })
            .collect()
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Repeat for each contender, e.g. `--sampler gaussian --sampler uniform`.
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// `pareto:scale,shape`, `gaussian:mean,std`, or `lognormal:loc,scale`.
    #[arg(long, default_value = "pareto:1,1.5", value_parser = parse_density)]
    density: LossDensity,
    /// Exponent λ; repeat for a grid.
    #[arg(
        long = "lambda",
        allow_hyphen_values = true,
        value_parser = parse_positive,
        default_values_t = [0.01, 0.1, 0.5]
    )]
    lambdas: Vec<f64>,
    /// Truncation cutoffs, strictly increasing.
    #[arg(
        long,
        value_delimiter = ',',
        value_parser = parse_positive,
        default_values_t = [100.0, 1000.0, 10000.0]
    )]
    cutoffs: Vec<f64>,
    #[arg(long, allow_hyphen_values = true, value_parser = parse_finite)]
    mu: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Comma-separated μ values.
    #[arg(
        long,
        allow_hyphen_values = true,
        value_delimiter = ',',
        value_parser = parse_finite,
        default_values_t = [0.0]
    )]
    mu_grid: Vec<f64>,
    /// Comma-separated σ values (each > 0).
    #[arg(
        long,
        value_delimiter = ',',
        value_parser = parse_positive,
        default_values_t = [1.0]
    )]
    sigma_grid: Vec<f64>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    /// Total points across the two clusters.
    #[arg(long, default_value_t = 1000, value_parser = parse_nonzero_usize)]
    n: usize,
    /// Cluster standard deviation.
    #[arg(long, default_value_t = 0.3, value_parser = parse_positive)]
    sigma_cluster: f64,
    #[arg(long, default_value = "-0.5,-0.5", allow_hyphen_values = true, value_parser = parse_point)]
    center_a: Point2,
    #[arg(long, default_value = "0.5,0.5", allow_hyphen_values = true, value_parser = parse_point)]
    center_b: Point2,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory holding run.json, compare.json, or grid.json.
    #[arg(long)]
    run: PathBuf,
    /// Where the CSVs go; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses argv and runs one subcommand, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    if let Err(err) = configure_threads() {
        eprintln!("error: {err}");
        return err.exit_code();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

/// Honors `TAILGUARD_THREADS` as a cap on rayon's worker pool.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("TAILGUARD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("TAILGUARD_THREADS='{raw}' is not a count ≥ 1")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::VerifyTheory(args) => cmd_verify_theory(&args),
        Command::GridSearch(args) => cmd_grid_search(&args),
        Command::DemoSynth(args) => cmd_demo_synthetic(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

/// Splits, scales (train statistics only), and windows the CSV.
fn prepare_windows(
    args: &DataArgs,
) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>, Vec<SampleWindow>)> {
    let has_date = sniff_date_column(&args.data)?;
    let series = load_csv(&args.data, has_date)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.data.display())))?;
    let (train_rows, val_rows, test_rows) = split(
        &series,
        &args.split,
        args.freq.samples_per_month(),
        args.lookback,
        args.horizon,
    )?;
    let scaler = fit_scaler(&train_rows);
    let train = make_windows(&apply_scaler(&train_rows, &scaler), args.lookback, args.horizon)?;
    let val = make_windows(&apply_scaler(&val_rows, &scaler), args.lookback, args.horizon)?;
    let test = make_windows(&apply_scaler(&test_rows, &scaler), args.lookback, args.horizon)?;
    Ok((train, val, test))
}

/// A leading date column is one whose first data cell is not a number.
fn sniff_date_column(path: &Path) -> Result<bool> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut records = reader.records();
    match records.next() {
        Some(record) => {
            let record = record.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            Ok(record.get(0).is_some_and(|cell| cell.trim().parse::<f64>().is_err()))
        }
        None => Ok(false),
    }
}

fn build_config(fit: &FitArgs, sampler: SamplerKind) -> TrainConfig {
    TrainConfig {
        epochs: fit.epochs,
        patience: fit.patience,
        batch_size: fit.batch_size,
        tau: fit.tau,
        lr: fit.lr,
        seed: fit.seed,
        sampler,
        augment: fit.augment.then(EraseParams::standard),
        full_loss_pass: fit.full_loss_pass,
    }
}

fn model_spec(fit: &FitArgs, data: &DataArgs) -> ModelSpec {
    ModelSpec::new(fit.model, data.lookback, data.horizon)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let samplers = args.sampler.resolve()?;
    let [sampler] = samplers.as_slice() else {
        return Err(CliError::Usage("train takes exactly one --sampler".to_owned()));
    };
    let config = build_config(&args.fit, *sampler);
    config.validate().map_err(CliError::from)?;
    let (train_w, val_w, test_w) = prepare_windows(&args.data)?;
    let setup = TrainSetup {
        train: &train_w,
        val: &val_w,
        test: &test_w,
        model: model_spec(&args.fit, &args.data),
    };
    let outcome = train(&setup, &config)?;
    write_run_artifacts(&args.fit.out, &setup, &config, &outcome)?;
    println!(
        "{}: best epoch {} val MSE {:.6} test MSE {:.6} top5 MMSE {:.6} ({} epochs{})",
        sampler.label(),
        outcome.run.best_epoch,
        outcome.run.best_val_mse,
        outcome.run.final_test_mse,
        outcome.run.top5_mmse,
        outcome.run.records.len(),
        if outcome.run.stopped_early { ", stopped early" } else { "" },
    );
    println!("wrote {}", args.fit.out.join("run.json").display());
    Ok(())
}

pub const COMPARE_SCHEMA_VERSION: u32 = 1;

/// One contender's summary inside compare.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub sampler: String,
    /// Subdirectory holding this contender's full run artifacts.
    pub dir: String,
    pub best_epoch: Option<u32>,
    pub best_val_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub top5_mmse: Option<f64>,
    /// First epoch at or below the baseline's best test MSE.
    pub epochs_to_baseline_best: Option<u32>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompareDoc {
    schema_version: u32,
    baseline: String,
    rows: Vec<CompareRow>,
}

fn sanitize_label(label: &str) -> String {
    label.replace([':', '/', '\\'], "_")
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let samplers = args.sampler.resolve()?;
    if samplers.len() < 2 {
        return Err(CliError::Usage(
            "compare needs at least two --sampler flags".to_owned(),
        ));
    }
    let (train_w, val_w, test_w) = prepare_windows(&args.data)?;
    let setup = TrainSetup {
        train: &train_w,
        val: &val_w,
        test: &test_w,
        model: model_spec(&args.fit, &args.data),
    };

    let outcomes: Vec<(SamplerKind, std::result::Result<TrainOutcome, TrainerError>)> = samplers
        .iter()
        .map(|&sampler| {
            let config = build_config(&args.fit, sampler);
            (sampler, config.validate().and_then(|()| train(&setup, &config)))
        })
        .collect();

    let baseline_idx = samplers
        .iter()
        .position(|s| matches!(s, SamplerKind::Uniform))
        .unwrap_or(0);
    let baseline_best = outcomes[baseline_idx].1.as_ref().ok().map(|out| {
        out.run
            .records
            .iter()
            .map(|r| r.test_mse)
            .fold(f64::INFINITY, f64::min)
    });

    let mut rows = Vec::new();
    let mut any_ok = false;
    for (sampler, outcome) in &outcomes {
        let label = sampler.label();
        let dir = sanitize_label(&label);
        match outcome {
            Ok(out) => {
                any_ok = true;
                let config = build_config(&args.fit, *sampler);
                write_run_artifacts(&args.fit.out.join(&dir), &setup, &config, out)?;
                rows.push(CompareRow {
                    sampler: label,
                    dir,
                    best_epoch: Some(out.run.best_epoch),
                    best_val_mse: Some(out.run.best_val_mse),
                    test_mse: Some(out.run.final_test_mse),
                    top5_mmse: Some(out.run.top5_mmse),
                    epochs_to_baseline_best: baseline_best
                        .and_then(|t| epochs_to_target(&out.run.records, t)),
                    error: None,
                });
            }
            Err(err) => rows.push(CompareRow {
                sampler: label,
                dir,
                best_epoch: None,
                best_val_mse: None,
                test_mse: None,
                top5_mmse: None,
                epochs_to_baseline_best: None,
                error: Some(err.to_string()),
            }),
        }
    }

    let doc = CompareDoc {
        schema_version: COMPARE_SCHEMA_VERSION,
        baseline: samplers[baseline_idx].label(),
        rows,
    };
    std::fs::create_dir_all(&args.fit.out)?;
    write_atomic(&args.fit.out.join("compare.json"), &serde_json::to_vec_pretty(&doc)?)?;
    write_compare_csv(&args.fit.out.join("compare.csv"), &doc)?;

    for row in &doc.rows {
        match &row.error {
            None => println!(
                "{}: test MSE {:.6} top5 MMSE {:.6} epochs-to-baseline-best {}",
                row.sampler,
                row.test_mse.unwrap_or(f64::NAN),
                row.top5_mmse.unwrap_or(f64::NAN),
                row.epochs_to_baseline_best.map_or("-".to_owned(), |e| e.to_string()),
            ),
            Some(err) => println!("{}: failed ({err})", row.sampler),
        }
    }
    println!("wrote {}", args.fit.out.join("compare.json").display());
    if any_ok {
        Ok(())
    } else {
        Err(CliError::Numerical("every compare run failed".to_owned()))
    }
}

fn write_compare_csv(path: &Path, doc: &CompareDoc) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "sampler",
        "best_epoch",
        "best_val_mse",
        "test_mse",
        "top5_mmse",
        "epochs_to_baseline_best",
        "error",
    ])?;
    for row in &doc.rows {
        writer.write_record([
            row.sampler.clone(),
            row.best_epoch.map_or(String::new(), |v| v.to_string()),
            row.best_val_mse.map_or(String::new(), |v| v.to_string()),
            row.test_mse.map_or(String::new(), |v| v.to_string()),
            row.top5_mmse.map_or(String::new(), |v| v.to_string()),
            row.epochs_to_baseline_best.map_or(String::new(), |v| v.to_string()),
            row.error.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = writer.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn cmd_verify_theory(args: &VerifyArgs) -> Result<()> {
    let params = GaussianWeightParams::new(args.mu.unwrap_or(0.0), args.sigma.unwrap_or(1.0))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let settings = VerifySettings { seed: args.seed, ..VerifySettings::default() };
    let reports = args
        .lambdas
        .iter()
        .map(|&lambda| verify_theorem1(&args.density, &params, lambda, &args.cutoffs, &settings))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    std::fs::create_dir_all(&args.out)?;
    write_atomic(&args.out.join("tail_report.json"), &serde_json::to_vec_pretty(&reports)?)?;

    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "lambda",
        "cutoff",
        "raw_moment",
        "ln_raw_moment",
        "weighted_moment",
        "ln_weighted_moment",
    ])?;
    for report in &reports {
        for (j, &cutoff) in report.cutoffs.iter().enumerate() {
            writer.write_record([
                report.lambda.to_string(),
                cutoff.to_string(),
                report.raw_moments[j].to_string(),
                report.ln_raw_moments[j].to_string(),
                report.weighted_moments[j].to_string(),
                report.ln_weighted_moments[j].to_string(),
            ])?;
        }
    }
    let bytes = writer.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&args.out.join("tail_moments.csv"), &bytes)?;

    for report in &reports {
        println!(
            "λ={}: raw {} (hill {:.3}), reweighted {} (hill {:.3}), C={:.4}, C'={:.4}, \
             precondition {}, bound {}",
            report.lambda,
            report.verdict_raw,
            report.hill_raw,
            report.verdict_weighted,
            report.hill_weighted,
            report.c,
            report.c_prime,
            if report.precondition_holds { "holds" } else { "fails" },
            if report.bound_holds { "holds" } else { "fails" },
        );
    }
    println!("wrote {}", args.out.join("tail_report.json").display());
    Ok(())
}

pub const GRID_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GridDoc {
    schema_version: u32,
    cells: Vec<crate::trainer::GridCell>,
    best: Option<usize>,
}

fn cmd_grid_search(args: &GridArgs) -> Result<()> {
    for &sigma in &args.sigma_grid {
        if sigma <= 0.0 {
            return Err(CliError::Usage(format!("--sigma-grid entries must be > 0, got {sigma}")));
        }
    }
    let base = build_config(&args.fit, SamplerKind::Gaussian(GaussianWeightParams::standard()));
    base.validate().map_err(CliError::from)?;
    let (train_w, val_w, test_w) = prepare_windows(&args.data)?;
    let setup = TrainSetup {
        train: &train_w,
        val: &val_w,
        test: &test_w,
        model: model_spec(&args.fit, &args.data),
    };
    let result = grid_search(&setup, &base, &args.mu_grid, &args.sigma_grid)?;

    std::fs::create_dir_all(&args.fit.out)?;
    let doc =
        GridDoc { schema_version: GRID_SCHEMA_VERSION, cells: result.cells, best: result.best };
    write_atomic(&args.fit.out.join("grid.json"), &serde_json::to_vec_pretty(&doc)?)?;
    write_grid_csv(&args.fit.out.join("grid_surface.csv"), &doc.cells)?;

    match doc.best {
        Some(i) => {
            let cell = &doc.cells[i];
            println!(
                "best cell μ={} σ={} test MSE {:.6} ({} cells)",
                cell.mu,
                cell.sigma,
                cell.test_mse.unwrap_or(f64::NAN),
                doc.cells.len(),
            );
        }
        None => println!("no cell succeeded ({} cells)", doc.cells.len()),
    }
    println!("wrote {}", args.fit.out.join("grid.json").display());
    Ok(())
}

fn write_grid_csv(path: &Path, cells: &[crate::trainer::GridCell]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["mu", "sigma", "test_mse", "top5_mmse", "error"])?;
    for cell in cells {
        writer.write_record([
            cell.mu.to_string(),
            cell.sigma.to_string(),
            cell.test_mse.map_or(String::new(), |v| v.to_string()),
            cell.top5_mmse.map_or(String::new(), |v| v.to_string()),
            cell.error.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = writer.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Figure-style demo: two Gaussian clusters, a logistic probe trained
/// 500 full-batch steps at lr 0.1, per-point cross-entropy losses, and
/// their Gaussian weights.
fn cmd_demo_synthetic(args: &DemoArgs) -> Result<()> {
    if args.n < 2 {
        return Err(CliError::Usage(format!("--n must be ≥ 2, got {}", args.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let normal = StandardNormal;
    let mut points = Array2::zeros((args.n, 2));
    let mut classes = vec![0u8; args.n];
    for i in 0..args.n {
        let class = (i % 2) as u8;
        let center = if class == 0 { args.center_a } else { args.center_b };
        let dx: f64 = normal.sample(&mut rng);
        let dy: f64 = normal.sample(&mut rng);
        points[[i, 0]] = center.x + args.sigma_cluster * dx;
        points[[i, 1]] = center.y + args.sigma_cluster * dy;
        classes[i] = class;
    }

    let mut w = [0.0f64; 2];
    let mut b = 0.0f64;
    for _ in 0..500 {
        let mut gw = [0.0f64; 2];
        let mut gb = 0.0f64;
        for i in 0..args.n {
            let p = sigmoid(w[0] * points[[i, 0]] + w[1] * points[[i, 1]] + b);
            let err = p - classes[i] as f64;
            gw[0] += err * points[[i, 0]];
            gw[1] += err * points[[i, 1]];
            gb += err;
        }
        let scale = 0.1 / args.n as f64;
        w[0] -= scale * gw[0];
        w[1] -= scale * gw[1];
        b -= scale * gb;
    }

    let losses: Vec<f64> = (0..args.n)
        .map(|i| {
            let p = sigmoid(w[0] * points[[i, 0]] + w[1] * points[[i, 1]] + b);
            if classes[i] == 1 {
                -p.max(1e-300).ln()
            } else {
                -(1.0 - p).max(1e-300).ln()
            }
        })
        .collect();
    let stats = LossStats::from_losses(&losses)?;
    let weight_params = GaussianWeightParams::standard();
    let weights: Vec<f64> = losses.iter().map(|&x| weight_params.density(stats.z(x))).collect();

    std::fs::create_dir_all(&args.out)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["x1", "x2", "class", "loss", "weight"])?;
    for i in 0..args.n {
        writer.write_record([
            points[[i, 0]].to_string(),
            points[[i, 1]].to_string(),
            classes[i].to_string(),
            losses[i].to_string(),
            weights[i].to_string(),
        ])?;
    }
    let bytes = writer.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&args.out.join("demo_points.csv"), &bytes)?;

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in points.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let (lo, hi) = (lo - 0.2, hi + 0.2);
    const GRID_STEPS: usize = 61;
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["x1", "x2", "prob"])?;
    for i in 0..GRID_STEPS {
        for j in 0..GRID_STEPS {
            let x1 = lo + (hi - lo) * i as f64 / (GRID_STEPS - 1) as f64;
            let x2 = lo + (hi - lo) * j as f64 / (GRID_STEPS - 1) as f64;
            let p = sigmoid(w[0] * x1 + w[1] * x2 + b);
            writer.write_record([x1.to_string(), x2.to_string(), p.to_string()])?;
        }
    }
    let bytes = writer.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&args.out.join("demo_grid.csv"), &bytes)?;

    let correct = (0..args.n)
        .filter(|&i| {
            let p = sigmoid(w[0] * points[[i, 0]] + w[1] * points[[i, 1]] + b);
            (p >= 0.5) == (classes[i] == 1)
        })
        .count();
    println!(
        "{} points, train accuracy {:.3}, loss mean {:.4} std {:.4}",
        args.n,
        correct as f64 / args.n as f64,
        stats.mu_x,
        stats.sigma_x,
    );
    println!("wrote {}", args.out.join("demo_points.csv").display());
    Ok(())
}

/// The slice of run.json the report command needs back.
#[derive(Debug, Deserialize)]
struct RunDocIn {
    schema_version: u32,
    #[serde(default = "default_run_label")]
    sampler: String,
    records: Vec<EpochRecord>,
    best_epoch: u32,
    best_val_mse: f64,
    final_test_mse: f64,
    top5_mmse: f64,
}

fn default_run_label() -> String {
    "run".to_owned()
}

fn read_run_doc(path: &Path) -> Result<RunDocIn> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let doc: RunDocIn = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if doc.schema_version != RUN_SCHEMA_VERSION {
        return Err(CliError::Data(format!(
            "{}: unsupported schema version {} (expected {})",
            path.display(),
            doc.schema_version,
            RUN_SCHEMA_VERSION,
        )));
    }
    Ok(doc)
}

/// Finds the highest-epoch `loss_hist_epoch_<k>.csv` in a run directory.
fn find_loss_hist(dir: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(dir).ok()?;
    entries
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            let k: u64 = name.strip_prefix("loss_hist_epoch_")?.strip_suffix(".csv")?.parse().ok()?;
            Some((k, name))
        })
        .max_by_key(|(k, _)| *k)
        .map(|(_, name)| dir.join(name))
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let run_dir = &args.run;
    let out_dir = args.out.as_deref().unwrap_or(run_dir);
    let single = run_dir.join("run.json");
    let compare = run_dir.join("compare.json");
    let grid = run_dir.join("grid.json");
    if !single.exists() && !compare.exists() && !grid.exists() {
        return Err(CliError::Data(format!(
            "{}: no run.json, compare.json, or grid.json",
            run_dir.display(),
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut runs: Vec<(String, PathBuf, RunDocIn)> = Vec::new();
    if single.exists() {
        let doc = read_run_doc(&single)?;
        runs.push((doc.sampler.clone(), run_dir.clone(), doc));
    }
    if compare.exists() {
        let text = std::fs::read_to_string(&compare)?;
        let doc: CompareDoc = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", compare.display())))?;
        if doc.schema_version != COMPARE_SCHEMA_VERSION {
            return Err(CliError::Data(format!(
                "{}: unsupported schema version {}",
                compare.display(),
                doc.schema_version,
            )));
        }
        for row in &doc.rows {
            if row.error.is_none() {
                let sub = run_dir.join(&row.dir);
                let run = read_run_doc(&sub.join("run.json"))?;
                runs.push((row.sampler.clone(), sub, run));
            }
        }
    }

    let mut wrote = Vec::new();
    if !runs.is_empty() {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["run", "epoch", "train_loss", "val_mse", "test_mse", "tmse"])?;
        for (label, _, doc) in &runs {
            for r in &doc.records {
                writer.write_record([
                    label.clone(),
                    r.epoch.to_string(),
                    r.train_loss.to_string(),
                    r.val_mse.to_string(),
                    r.test_mse.to_string(),
                    r.tmse.to_string(),
                ])?;
            }
        }
        let bytes = writer.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(&out_dir.join("curves.csv"), &bytes)?;
        wrote.push("curves.csv");

        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["run", "bin_lo", "bin_hi", "count", "reweighted_count"])?;
        for (label, dir, _) in &runs {
            let Some(hist_path) = find_loss_hist(dir) else {
                continue;
            };
            let mut reader = csv::Reader::from_path(&hist_path)?;
            for record in reader.records() {
                let record = record?;
                let mut row = vec![label.clone()];
                row.extend(record.iter().map(str::to_owned));
                writer.write_record(&row)?;
            }
        }
        let bytes = writer.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(&out_dir.join("loss_hist.csv"), &bytes)?;
        wrote.push("loss_hist.csv");

        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record([
            "run",
            "best_epoch",
            "best_val_mse",
            "test_mse",
            "top5_mmse",
            "epochs_to_own_best",
        ])?;
        for (label, _, doc) in &runs {
            let own_best =
                doc.records.iter().map(|r| r.test_mse).fold(f64::INFINITY, f64::min);
            writer.write_record([
                label.clone(),
                doc.best_epoch.to_string(),
                doc.best_val_mse.to_string(),
                doc.final_test_mse.to_string(),
                doc.top5_mmse.to_string(),
                epochs_to_target(&doc.records, own_best)
                    .map_or(String::new(), |e| e.to_string()),
            ])?;
        }
        let bytes = writer.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(&out_dir.join("table.csv"), &bytes)?;
        wrote.push("table.csv");
    }

    if grid.exists() {
        let text = std::fs::read_to_string(&grid)?;
        let doc: GridDoc = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", grid.display())))?;
        if doc.schema_version != GRID_SCHEMA_VERSION {
            return Err(CliError::Data(format!(
                "{}: unsupported schema version {}",
                grid.display(),
                doc.schema_version,
            )));
        }
        write_grid_csv(&out_dir.join("grid_surface.csv"), &doc.cells)?;
        wrote.push("grid_surface.csv");
    }

    println!("wrote {} in {}", wrote.join(", "), out_dir.display());
    Ok(())
}
