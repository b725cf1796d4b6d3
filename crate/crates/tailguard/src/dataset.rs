//! CSV ingestion, chronological splits, train-fit scaling, sliding
//! windows, and random-erase augmentation.
//!
//! A [`RawSeries`] is an N×M matrix of time steps by features. Splitting
//! is a contiguous prefix/middle/suffix partition in time order; the val
//! and test pieces are extended backwards by the lookback so their first
//! forecast window exists. Windows are channel-independent: each feature
//! column yields its own univariate samples, with ids assigned channel-
//! major so `id = channel·per_channel + t`.

use std::fmt;
use std::io;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

/// Errors from ingestion, splitting, and windowing.
#[derive(Debug)]
pub enum DatasetError {
    Io(io::Error),
    Csv(csv::Error),
    /// A cell failed to parse as a number; `row` counts 1-based file rows
    /// (the header is row 1) and `col` counts 1-based columns.
    Parse { row: usize, col: usize, cell: String },
    /// A cell parsed but was NaN or infinite.
    NonFinite { row: usize, col: usize, value: f64 },
    /// Fewer than two data rows, or no feature columns.
    Empty { rows: usize, cols: usize },
    Split(String),
    Window { rows: usize, needed: usize },
    InvalidParam { what: &'static str, value: f64 },
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Io(err) => write!(f, "io: {err}"),
            DatasetError::Csv(err) => write!(f, "csv: {err}"),
            DatasetError::Parse { row, col, cell } => {
                write!(f, "row {row}, column {col}: cannot parse '{cell}' as a number")
            }
            DatasetError::NonFinite { row, col, value } => {
                write!(f, "row {row}, column {col}: non-finite value {value}")
            }
            DatasetError::Empty { rows, cols } => {
                write!(f, "need at least 2 data rows and 1 feature column, got {rows}x{cols}")
            }
            DatasetError::Split(msg) => write!(f, "split: {msg}"),
            DatasetError::Window { rows, needed } => {
                write!(f, "{rows} rows cannot hold a window of lookback+horizon {needed}")
            }
            DatasetError::InvalidParam { what, value } => write!(f, "invalid {what}: {value}"),
        }
    }
}

impl std::error::Error for DatasetError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DatasetError::Io(err) => Some(err),
            DatasetError::Csv(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for DatasetError {
    fn from(err: io::Error) -> Self {
        DatasetError::Io(err)
    }
}

impl From<csv::Error> for DatasetError {
    fn from(err: csv::Error) -> Self {
        DatasetError::Csv(err)
    }
}

type Result<T> = std::result::Result<T, DatasetError>;

/// A multivariate series: N time steps by M features, all finite.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub values: Array2<f64>,
    pub timestamps: Option<Vec<String>>,
    pub feature_names: Vec<String>,
}

impl RawSeries {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn features(&self) -> usize {
        self.values.ncols()
    }
}

/// Loads a header-first CSV of numbers; with `has_date_column` the first
/// column is kept as timestamps instead of data.
pub fn load_csv(path: &Path, has_date_column: bool) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let skip = usize::from(has_date_column);
    let headers = reader.headers()?.clone();
    let feature_names: Vec<String> = headers.iter().skip(skip).map(str::to_owned).collect();

    let mut timestamps = has_date_column.then(Vec::new);
    let mut flat = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let file_row = i + 2;
        if let Some(stamps) = timestamps.as_mut() {
            stamps.push(record.get(0).unwrap_or("").to_owned());
        }
        for (j, cell) in record.iter().enumerate().skip(skip) {
            let value: f64 = cell.trim().parse().map_err(|_| DatasetError::Parse {
                row: file_row,
                col: j + 1,
                cell: cell.to_owned(),
            })?;
            if !value.is_finite() {
                return Err(DatasetError::NonFinite { row: file_row, col: j + 1, value });
            }
            flat.push(value);
        }
        rows += 1;
    }

    let cols = feature_names.len();
    if rows < 2 || cols == 0 {
        return Err(DatasetError::Empty { rows, cols });
    }
    let values = Array2::from_shape_vec((rows, cols), flat)
        .map_err(|_| DatasetError::Empty { rows, cols })?;
    Ok(RawSeries { values, timestamps, feature_names })
}

/// How to carve the series into train/val/test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SplitSpec {
    /// Month counts, each worth `samples_per_month` rows.
    ByMonths { train: u32, val: u32, test: u32 },
    /// Fractions of the row count; must sum to 1.
    ByFraction { train: f64, val: f64, test: f64 },
}

impl SplitSpec {
    pub fn by_months(train: u32, val: u32, test: u32) -> Result<Self> {
        for (what, v) in [("train months", train), ("val months", val), ("test months", test)] {
            if v == 0 {
                return Err(DatasetError::InvalidParam { what, value: v as f64 });
            }
        }
        Ok(SplitSpec::ByMonths { train, val, test })
    }

    pub fn by_fraction(train: f64, val: f64, test: f64) -> Result<Self> {
        for (what, v) in [("train frac", train), ("val frac", val), ("test frac", test)] {
            if !(v.is_finite() && v > 0.0 && v < 1.0) {
                return Err(DatasetError::InvalidParam { what, value: v });
            }
        }
        if ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Split(format!(
                "fractions sum to {}, expected 1",
                train + val + test
            )));
        }
        Ok(SplitSpec::ByFraction { train, val, test })
    }
}

/// Parses `months:12,4,4` or `frac:0.7,0.1,0.2`.
impl std::str::FromStr for SplitSpec {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| DatasetError::Split(format!("missing ':' in split '{s}'")))?;
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 3 {
            return Err(DatasetError::Split(format!("split '{s}' needs three values")));
        }
        match kind {
            "months" => {
                let mut nums = [0u32; 3];
                for (slot, part) in nums.iter_mut().zip(&parts) {
                    *slot = part.trim().parse().map_err(|_| {
                        DatasetError::Split(format!("bad month count '{part}' in '{s}'"))
                    })?;
                }
                SplitSpec::by_months(nums[0], nums[1], nums[2])
            }
            "frac" => {
                let mut nums = [0.0f64; 3];
                for (slot, part) in nums.iter_mut().zip(&parts) {
                    *slot = part.trim().parse().map_err(|_| {
                        DatasetError::Split(format!("bad fraction '{part}' in '{s}'"))
                    })?;
                }
                SplitSpec::by_fraction(nums[0], nums[1], nums[2])
            }
            other => Err(DatasetError::Split(format!("unknown split kind '{other}'"))),
        }
    }
}

/// Sampling cadence of the series; fixes the rows-per-month conversion
/// (months are 30 days).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Freq {
    Hourly,
    Min15,
}

impl Freq {
    pub fn samples_per_month(self) -> usize {
        match self {
            Freq::Hourly => 30 * 24,
            Freq::Min15 => 30 * 24 * 4,
        }
    }
}

impl std::str::FromStr for Freq {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hourly" => Ok(Freq::Hourly),
            "15min" => Ok(Freq::Min15),
            other => Err(DatasetError::Split(format!("unknown freq '{other}'"))),
        }
    }
}

fn slice_rows(series: &RawSeries, lo: usize, hi: usize) -> RawSeries {
    RawSeries {
        values: series.values.slice(ndarray::s![lo..hi, ..]).to_owned(),
        timestamps: series.timestamps.as_ref().map(|t| t[lo..hi].to_vec()),
        feature_names: series.feature_names.clone(),
    }
}

/// Splits into chronological train/val/test; val and test keep the
/// trailing `lookback` rows of the preceding piece as warm-up so their
/// first window exists.
pub fn split(
    series: &RawSeries,
    spec: &SplitSpec,
    samples_per_month: usize,
    lookback: usize,
    horizon: usize,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    let n = series.rows();
    let (a, b, c) = match *spec {
        SplitSpec::ByMonths { train, val, test } => {
            let a = train as usize * samples_per_month;
            let b = a + val as usize * samples_per_month;
            let c = b + test as usize * samples_per_month;
            if c > n {
                return Err(DatasetError::Split(format!(
                    "need {c} rows for the requested months, have {n}"
                )));
            }
            (a, b, c)
        }
        SplitSpec::ByFraction { train, val, .. } => {
            let a = (n as f64 * train).floor() as usize;
            let b = a + (n as f64 * val).floor() as usize;
            (a, b, n)
        }
    };
    let needed = lookback + horizon;
    for (name, len) in [("train", a), ("val", b - a), ("test", c - b)] {
        if len < needed {
            return Err(DatasetError::Split(format!(
                "{name} piece has {len} rows, needs at least lookback+horizon = {needed}"
            )));
        }
    }
    Ok((
        slice_rows(series, 0, a),
        slice_rows(series, a - lookback, b),
        slice_rows(series, b - lookback, c),
    ))
}

/// Per-feature standardization statistics, fit on the train split only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-12;

pub fn fit_scaler(train: &RawSeries) -> Scaler {
    let n = train.rows() as f64;
    let mut mean = Vec::with_capacity(train.features());
    let mut std = Vec::with_capacity(train.features());
    for col in train.values.columns() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt().max(STD_FLOOR));
    }
    Scaler { mean, std }
}

pub fn apply_scaler(series: &RawSeries, scaler: &Scaler) -> RawSeries {
    let mut values = series.values.clone();
    for (j, mut col) in values.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| (v - scaler.mean[j]) / scaler.std[j]);
    }
    RawSeries { values, timestamps: series.timestamps.clone(), feature_names: series.feature_names.clone() }
}

pub fn invert_scaler(series: &RawSeries, scaler: &Scaler) -> RawSeries {
    let mut values = series.values.clone();
    for (j, mut col) in values.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| v * scaler.std[j] + scaler.mean[j]);
    }
    RawSeries { values, timestamps: series.timestamps.clone(), feature_names: series.feature_names.clone() }
}

/// One univariate training sample: `lookback` inputs and `horizon`
/// targets cut from a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    /// Stable across epochs; equals `channel·per_channel + t`.
    pub id: usize,
    pub channel: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Emits every channel-independent window: for each channel `m` and start
/// `t ≤ N−L−T`, inputs are rows `[t, t+L)` and targets rows `[t+L, t+L+T)`
/// of column `m`. Ids run channel-major, time-minor.
pub fn make_windows(series: &RawSeries, lookback: usize, horizon: usize) -> Result<Vec<SampleWindow>> {
    for (what, v) in [("lookback", lookback), ("horizon", horizon)] {
        if v == 0 {
            return Err(DatasetError::InvalidParam { what, value: 0.0 });
        }
    }
    let n = series.rows();
    let needed = lookback + horizon;
    if n < needed {
        return Err(DatasetError::Window { rows: n, needed });
    }
    let per_channel = n - needed + 1;
    let mut windows = Vec::with_capacity(series.features() * per_channel);
    for (m, col) in series.values.columns().into_iter().enumerate() {
        for t in 0..per_channel {
            windows.push(SampleWindow {
                id: m * per_channel + t,
                channel: m,
                input: col.slice(ndarray::s![t..t + lookback]).to_vec(),
                target: col.slice(ndarray::s![t + lookback..t + needed]).to_vec(),
            });
        }
    }
    Ok(windows)
}

/// Random-erase augmentation settings; constructing them enforces
/// `0 ≤ p ≤ 1` and `0 < lo ≤ hi < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EraseParams {
    p: f64,
    frac_lo: f64,
    frac_hi: f64,
}

impl EraseParams {
    pub fn new(p: f64, frac_lo: f64, frac_hi: f64) -> Result<Self> {
        if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
            return Err(DatasetError::InvalidParam { what: "erase probability", value: p });
        }
        if !(frac_lo.is_finite() && frac_hi.is_finite() && 0.0 < frac_lo && frac_lo <= frac_hi && frac_hi < 1.0)
        {
            return Err(DatasetError::InvalidParam { what: "erase fraction", value: frac_lo });
        }
        Ok(EraseParams { p, frac_lo, frac_hi })
    }

    /// Defaults: p = 0.5, fraction range (0.05, 0.2).
    pub fn standard() -> Self {
        EraseParams { p: 0.5, frac_lo: 0.05, frac_hi: 0.2 }
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// With probability `p`, zeroes a contiguous input segment of length
/// `round(u·L)`, `u` uniform in the fraction range. The target and id are
/// untouched.
pub fn random_erase<R: Rng + ?Sized>(
    window: &SampleWindow,
    params: &EraseParams,
    rng: &mut R,
) -> SampleWindow {
    let mut out = window.clone();
    if rng.random::<f64>() >= params.p {
        return out;
    }
    let len_in = out.input.len();
    let u = rng.random_range(params.frac_lo..=params.frac_hi);
    let erase_len = ((u * len_in as f64).round() as usize).min(len_in);
    if erase_len == 0 {
        return out;
    }
    let start = rng.random_range(0..=len_in - erase_len);
    for v in &mut out.input[start..start + erase_len] {
        *v = 0.0;
    }
    out
}
