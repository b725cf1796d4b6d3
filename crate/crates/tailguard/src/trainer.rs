//! The epoch loop: draw indices from the active sampler, take gradient
//! steps, record pre-step losses, refresh sampler weights, and track
//! metrics with smoothed early stopping.
//!
//! Per epoch the budget is N draws (the train-split size), chunked into
//! consecutive batches. The Gaussian sampler draws from its weight table
//! and refreshes weights once at epoch end; InfoBatch prunes below-mean
//! samples instead; uniform draws with replacement. Early stopping watches
//! `TMSE_{e+1} = τ·TMSE_e + (1−τ)·VMSE_e` with a patience counter, while
//! the shipped checkpoint is the epoch with the lowest raw validation MSE.

use std::fmt;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{random_erase, EraseParams, SampleWindow};
use crate::model::{
    step, Batch, Model, ModelError, ModelKind, OptimState, DEFAULT_HIDDEN,
};
use crate::sampler::{
    infobatch_filter, uniform_sampler, GaussianWeightParams, InfoBatchParams, SamplerError,
    SamplerState,
};

/// Errors from configuration, data wiring, and aborted runs.
#[derive(Debug)]
pub enum TrainerError {
    Config { what: &'static str, value: f64 },
    Data(String),
    /// A loss or parameter went NaN/Inf; the run is aborted.
    NonFinite { epoch: u32, batch: usize, what: &'static str },
    Model(ModelError),
    Sampler(SamplerError),
    Io(io::Error),
    Json(serde_json::Error),
    Csv(csv::Error),
}

impl fmt::Display for TrainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainerError::Config { what, value } => write!(f, "invalid {what}: {value}"),
            TrainerError::Data(msg) => write!(f, "data: {msg}"),
            TrainerError::NonFinite { epoch, batch, what } => {
                write!(f, "non-finite {what} at epoch {epoch}, batch {batch}; run aborted")
            }
            TrainerError::Model(err) => write!(f, "model: {err}"),
            TrainerError::Sampler(err) => write!(f, "sampler: {err}"),
            TrainerError::Io(err) => write!(f, "io: {err}"),
            TrainerError::Json(err) => write!(f, "json: {err}"),
            TrainerError::Csv(err) => write!(f, "csv: {err}"),
        }
    }
}

impl std::error::Error for TrainerError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainerError::Model(err) => Some(err),
            TrainerError::Sampler(err) => Some(err),
            TrainerError::Io(err) => Some(err),
            TrainerError::Json(err) => Some(err),
            TrainerError::Csv(err) => Some(err),
            _ => None,
        }
    }
}

impl From<ModelError> for TrainerError {
    fn from(err: ModelError) -> Self {
        TrainerError::Model(err)
    }
}

impl From<SamplerError> for TrainerError {
    fn from(err: SamplerError) -> Self {
        TrainerError::Sampler(err)
    }
}

impl From<io::Error> for TrainerError {
    fn from(err: io::Error) -> Self {
        TrainerError::Io(err)
    }
}

impl From<serde_json::Error> for TrainerError {
    fn from(err: serde_json::Error) -> Self {
        TrainerError::Json(err)
    }
}

impl From<csv::Error> for TrainerError {
    fn from(err: csv::Error) -> Self {
        TrainerError::Csv(err)
    }
}

type Result<T> = std::result::Result<T, TrainerError>;

/// Which index sampler drives an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SamplerKind {
    Gaussian(GaussianWeightParams),
    Uniform,
    InfoBatch(InfoBatchParams),
}

impl SamplerKind {
    /// Canonical token, round-trippable through `FromStr`.
    pub fn label(&self) -> String {
        match self {
            SamplerKind::Gaussian(_) => "gaussian".to_owned(),
            SamplerKind::Uniform => "uniform".to_owned(),
            SamplerKind::InfoBatch(p) => format!("infobatch:{}", p.prune_ratio()),
        }
    }
}

/// Parses `gaussian`, `uniform`, or `infobatch:<prune_ratio>`.
impl std::str::FromStr for SamplerKind {
    type Err = TrainerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(SamplerKind::Gaussian(GaussianWeightParams::standard())),
            "uniform" => Ok(SamplerKind::Uniform),
            _ => {
                let Some(ratio) = s.strip_prefix("infobatch:") else {
                    return Err(TrainerError::Data(format!("unknown sampler '{s}'")));
                };
                let ratio: f64 = ratio
                    .parse()
                    .map_err(|_| TrainerError::Data(format!("bad prune ratio in '{s}'")))?;
                Ok(SamplerKind::InfoBatch(InfoBatchParams::standard(ratio)?))
            }
        }
    }
}

pub const EARLY_STOP_TOLERANCE: f64 = 1e-6;

/// Hyperparameters for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub patience: u32,
    pub batch_size: usize,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub augment: Option<EraseParams>,
    /// Record fresh losses for every sample at epoch end instead of only
    /// the visited ones (slower, exact weight stats).
    pub full_loss_pass: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            patience: 20,
            batch_size: 128,
            tau: 0.9,
            lr: 1e-4,
            seed: 7,
            sampler: SamplerKind::Gaussian(GaussianWeightParams::standard()),
            augment: None,
            full_loss_pass: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainerError::Config { what: "epochs", value: 0.0 });
        }
        if self.patience == 0 || self.patience > self.epochs {
            return Err(TrainerError::Config { what: "patience", value: self.patience as f64 });
        }
        if self.batch_size == 0 {
            return Err(TrainerError::Config { what: "batch size", value: 0.0 });
        }
        if !(self.tau.is_finite() && (0.0..1.0).contains(&self.tau)) {
            return Err(TrainerError::Config { what: "tau", value: self.tau });
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainerError::Config { what: "learning rate", value: self.lr });
        }
        Ok(())
    }
}

/// Architecture summary used to build the model and echoed into run.json.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub lookback: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub last_value_head: bool,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, lookback: usize, horizon: usize) -> Self {
        ModelSpec { kind, lookback, horizon, hidden: DEFAULT_HIDDEN, last_value_head: true }
    }
}

/// Splits plus the model recipe; borrowed by every run of a search.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub train: &'a [SampleWindow],
    pub val: &'a [SampleWindow],
    pub test: &'a [SampleWindow],
    pub model: ModelSpec,
}

/// One epoch's metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub tmse: f64,
    pub wall_secs: f64,
}

/// The full metric history of a run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRun {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation MSE; the returned model is
    /// restored to it.
    pub best_epoch: u32,
    pub best_val_mse: f64,
    /// Test MSE at the best epoch.
    pub final_test_mse: f64,
    pub final_test_mae: f64,
    pub top5_mmse: f64,
    pub stopped_early: bool,
}

/// A finished run: the best checkpoint, its history, and the sampler
/// state (running losses + weights) at the end.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub run: TrainRun,
    pub state: SamplerState,
}

/// `TMSE_{e+1} = τ·TMSE_e + (1−τ)·VMSE_e`.
pub fn tmse_update(tmse_prev: f64, vmse: f64, tau: f64) -> f64 {
    tau * tmse_prev + (1.0 - tau) * vmse
}

/// Mean of the five smallest test MSE values (or fewer on short runs).
pub fn top5_mmse(records: &[EpochRecord]) -> f64 {
    let mut mses: Vec<f64> = records.iter().map(|r| r.test_mse).collect();
    mses.sort_by(f64::total_cmp);
    let k = mses.len().min(5);
    mses[..k].iter().sum::<f64>() / k as f64
}

/// First epoch whose test MSE reached `target`, if any.
pub fn epochs_to_target(records: &[EpochRecord], target: f64) -> Option<u32> {
    records.iter().find(|r| r.test_mse <= target).map(|r| r.epoch)
}

const EVAL_CHUNK: usize = 1024;

/// Unweighted MSE and MAE over every window of a split.
pub fn evaluate(model: &Model, windows: &[SampleWindow]) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Err(TrainerError::Data("cannot evaluate an empty split".to_owned()));
    }
    let mut sq_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut terms = 0usize;
    for chunk in windows.chunks(EVAL_CHUNK) {
        let refs: Vec<&SampleWindow> = chunk.iter().collect();
        let batch = Batch::from_windows(&refs)?;
        let pred = model.forward_batch(&batch.inputs)?;
        let diff = &pred - &batch.targets;
        sq_sum += diff.iter().map(|d| d * d).sum::<f64>();
        abs_sum += diff.iter().map(|d| d.abs()).sum::<f64>();
        terms += diff.len();
    }
    Ok((sq_sum / terms as f64, abs_sum / terms as f64))
}

fn record_chunk_losses(
    state: &mut SamplerState,
    ids: &[usize],
    losses: &[f64],
    epoch: u32,
    batch: usize,
) -> Result<()> {
    state.record_losses(ids, losses).map_err(|err| match err {
        SamplerError::NonFinite { .. } => {
            TrainerError::NonFinite { epoch, batch, what: "recorded loss" }
        }
        other => TrainerError::Sampler(other),
    })
}

/// Runs one epoch in place and returns the mean pre-step loss over the
/// drawn stream (NaN if InfoBatch pruned everything).
pub fn train_epoch(
    model: &mut Model,
    windows: &[SampleWindow],
    state: &mut SamplerState,
    config: &TrainConfig,
    epoch: u32,
    opt: &mut OptimState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = windows.len();
    let (ids, scales): (Vec<usize>, Vec<f64>) = match &config.sampler {
        SamplerKind::Gaussian(_) => (state.draw_epoch_indices(n, rng)?, vec![1.0; n]),
        SamplerKind::Uniform => (uniform_sampler(n, n, rng)?, vec![1.0; n]),
        SamplerKind::InfoBatch(params) => {
            let plan =
                infobatch_filter(state, params, epoch as usize - 1, config.epochs as usize, rng);
            let mut pairs: Vec<(usize, f64)> = plan.ids.into_iter().zip(plan.scales).collect();
            pairs.shuffle(rng);
            pairs.into_iter().unzip()
        }
    };

    let mut loss_sum = 0.0;
    for (batch_idx, (id_chunk, scale_chunk)) in ids
        .chunks(config.batch_size)
        .zip(scales.chunks(config.batch_size))
        .enumerate()
    {
        let batch = match &config.augment {
            Some(erase) => {
                let augmented: Vec<SampleWindow> = id_chunk
                    .iter()
                    .map(|&id| random_erase(&windows[id], erase, rng))
                    .collect();
                let refs: Vec<&SampleWindow> = augmented.iter().collect();
                Batch::from_windows(&refs)?
            }
            None => Batch::gather(windows, id_chunk)?,
        };
        let losses = model.per_sample_losses(&batch)?.to_vec();
        record_chunk_losses(state, id_chunk, &losses, epoch, batch_idx)?;
        loss_sum += losses.iter().sum::<f64>();

        let grads = model.gradient(&batch, scale_chunk)?;
        step(model, &grads, opt).map_err(|err| match err {
            ModelError::NonFinite { what } => {
                TrainerError::NonFinite { epoch, batch: batch_idx, what }
            }
            other => TrainerError::Model(other),
        })?;
    }

    if config.full_loss_pass {
        for (chunk_idx, chunk) in (0..n).collect::<Vec<_>>().chunks(EVAL_CHUNK).enumerate() {
            let batch = Batch::gather(windows, chunk)?;
            let losses = model.per_sample_losses(&batch)?.to_vec();
            record_chunk_losses(state, chunk, &losses, epoch, chunk_idx)?;
        }
    }

    if let SamplerKind::Gaussian(params) = &config.sampler {
        state.update_weights(params)?;
    }

    Ok(loss_sum / ids.len() as f64)
}

/// Trains from scratch and returns the best-validation checkpoint with
/// its history.
pub fn train(setup: &TrainSetup, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    for (name, split) in [("train", setup.train), ("val", setup.val), ("test", setup.test)] {
        if split.is_empty() {
            return Err(TrainerError::Data(format!("{name} split is empty")));
        }
    }
    let spec = setup.model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(
        spec.kind,
        spec.lookback,
        spec.horizon,
        spec.hidden,
        spec.last_value_head,
        &mut rng,
    )?;
    let mut state = SamplerState::new(setup.train.len())?;
    let mut opt = OptimState::adam(config.lr)?;

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best_model = model.clone();
    let mut best_epoch = 0u32;
    let mut best_val = f64::INFINITY;
    let mut best_tmse = f64::INFINITY;
    let mut tmse = f64::INFINITY;
    let mut stall = 0u32;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let train_loss =
            train_epoch(&mut model, setup.train, &mut state, config, epoch, &mut opt, &mut rng)?;
        let (val_mse, _) = evaluate(&model, setup.val)?;
        let (test_mse, test_mae) = evaluate(&model, setup.test)?;
        tmse = if epoch == 1 { val_mse } else { tmse_update(tmse, val_mse, config.tau) };
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_mse,
            test_mse,
            test_mae,
            tmse,
            wall_secs: t0.elapsed().as_secs_f64(),
        });

        if best_epoch == 0 || val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best_model = model.clone();
        }
        if tmse < best_tmse - EARLY_STOP_TOLERANCE {
            best_tmse = tmse;
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let best_record = records[best_epoch as usize - 1];
    let run = TrainRun {
        top5_mmse: top5_mmse(&records),
        best_epoch,
        best_val_mse: best_val,
        final_test_mse: best_record.test_mse,
        final_test_mae: best_record.test_mae,
        stopped_early,
        records,
    };
    Ok(TrainOutcome { model: best_model, run, state })
}

/// One grid-search cell; a failed run records its error instead of
/// aborting the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub mu: f64,
    pub sigma: f64,
    pub test_mse: Option<f64>,
    pub top5_mmse: Option<f64>,
    pub error: Option<String>,
}

/// The MSE surface over (μ, σ).
#[derive(Debug, Clone, Serialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the lowest test MSE, if any run succeeded.
    pub best: Option<usize>,
}

/// Trains one full run per (μ, σ) cell, all with the same seed, in
/// parallel across cells.
pub fn grid_search(
    setup: &TrainSetup,
    base: &TrainConfig,
    mu_grid: &[f64],
    sigma_grid: &[f64],
) -> Result<GridResult> {
    if mu_grid.is_empty() || sigma_grid.is_empty() {
        return Err(TrainerError::Config { what: "grid", value: 0.0 });
    }
    let pairs: Vec<(f64, f64)> = mu_grid
        .iter()
        .flat_map(|&mu| sigma_grid.iter().map(move |&sigma| (mu, sigma)))
        .collect();

    use rayon::prelude::*;
    let cells: Vec<GridCell> = pairs
        .par_iter()
        .map(|&(mu, sigma)| {
            let outcome = GaussianWeightParams::new(mu, sigma)
                .map_err(TrainerError::Sampler)
                .and_then(|params| {
                    let config =
                        TrainConfig { sampler: SamplerKind::Gaussian(params), ..*base };
                    train(setup, &config)
                });
            match outcome {
                Ok(out) => GridCell {
                    mu,
                    sigma,
                    test_mse: Some(out.run.final_test_mse),
                    top5_mmse: Some(out.run.top5_mmse),
                    error: None,
                },
                Err(err) => {
                    GridCell { mu, sigma, test_mse: None, top5_mmse: None, error: Some(err.to_string()) }
                }
            }
        })
        .collect();

    let best = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.test_mse.map(|m| (i, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    Ok(GridResult { cells, best })
}

/// Writes bytes to `path` via a temp file and rename, so readers never
/// observe a half-written artifact.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct RunDoc<'a> {
    schema_version: u32,
    sampler: String,
    config: &'a TrainConfig,
    model: &'a ModelSpec,
    dataset: DatasetSummary,
    #[serde(flatten)]
    run: &'a TrainRun,
}

#[derive(Serialize)]
struct DatasetSummary {
    train_windows: usize,
    val_windows: usize,
    test_windows: usize,
}

/// Writes `run.json` plus the final weight snapshot and loss histogram
/// (`weights_epoch_<k>.csv`, `loss_hist_epoch_<k>.csv`).
pub fn write_run_artifacts(
    dir: &Path,
    setup: &TrainSetup,
    config: &TrainConfig,
    outcome: &TrainOutcome,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let doc = RunDoc {
        schema_version: RUN_SCHEMA_VERSION,
        sampler: config.sampler.label(),
        config,
        model: &setup.model,
        dataset: DatasetSummary {
            train_windows: setup.train.len(),
            val_windows: setup.val.len(),
            test_windows: setup.test.len(),
        },
        run: &outcome.run,
    };
    write_atomic(&dir.join("run.json"), &serde_json::to_vec_pretty(&doc)?)?;

    let last_epoch = outcome.run.records.len();
    let snapshot = dir.join(format!("weights_epoch_{last_epoch}.csv"));
    crate::sampler::write_weight_snapshot(&outcome.state, &snapshot)?;
    write_loss_hist(
        &dir.join(format!("loss_hist_epoch_{last_epoch}.csv")),
        &outcome.state,
        HIST_BINS,
    )?;
    Ok(())
}

pub const HIST_BINS: usize = 30;

/// Histogram of running losses next to the reweighted counts
/// `w_i·N/Σw`, one row per bin plus a trailing row (empty bounds) for
/// samples with no observed loss; both count columns sum to N.
pub fn write_loss_hist(path: &Path, state: &SamplerState, bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(TrainerError::Config { what: "histogram bins", value: 0.0 });
    }
    let n = state.len();
    let weight_sum: f64 = state.weights().iter().sum();
    let reweight = |ids: &[usize]| -> f64 {
        ids.iter().map(|&i| state.weights()[i] * n as f64 / weight_sum).sum()
    };

    let observed: Vec<(usize, f64)> =
        (0..n).filter_map(|i| state.running_loss(i).map(|x| (i, x))).collect();
    let unobserved: Vec<usize> =
        (0..n).filter(|&i| state.running_loss(i).is_none()).collect();

    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["bin_lo", "bin_hi", "count", "reweighted_count"])?;
    if !observed.is_empty() {
        let lo = observed.iter().map(|(_, x)| *x).fold(f64::INFINITY, f64::min);
        let hi = observed.iter().map(|(_, x)| *x).fold(f64::NEG_INFINITY, f64::max);
        let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
        let mut binned: Vec<Vec<usize>> = vec![Vec::new(); bins];
        for &(i, x) in &observed {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            binned[b].push(i);
        }
        for (b, ids) in binned.iter().enumerate() {
            writer.write_record([
                format!("{}", lo + width * b as f64),
                format!("{}", (lo + width * (b + 1) as f64).min(hi)),
                format!("{}", ids.len()),
                format!("{}", reweight(ids)),
            ])?;
        }
    }
    writer.write_record([
        String::new(),
        String::new(),
        format!("{}", unobserved.len()),
        format!("{}", reweight(&unobserved)),
    ])?;
    let bytes = writer.into_inner().map_err(|e| TrainerError::Data(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}
