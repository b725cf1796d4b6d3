//! Forecasting models with closed-form gradients.
//!
//! Two architectures cover the linear/nonlinear contrast: a last-value-
//! head linear map (`ŷ = W(x − x_L·1) + b + x_L·1`) and a one-hidden-layer
//! gelu MLP with the same head. Gradients are analytic and batched;
//! training applies SGD or Adam steps. Checkpoints are versioned JSON of
//! named parameter arrays with shape metadata.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleWindow;

/// Errors from shape mismatches, optimizer steps, and checkpoints.
#[derive(Debug)]
pub enum ModelError {
    Shape { what: &'static str, expected: usize, got: usize },
    NonFinite { what: &'static str },
    InvalidParam { what: &'static str, value: f64 },
    Io(io::Error),
    Json(serde_json::Error),
    Checkpoint(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Shape { what, expected, got } => {
                write!(f, "{what}: expected length {expected}, got {got}")
            }
            ModelError::NonFinite { what } => write!(f, "non-finite {what}"),
            ModelError::InvalidParam { what, value } => write!(f, "invalid {what}: {value}"),
            ModelError::Io(err) => write!(f, "io: {err}"),
            ModelError::Json(err) => write!(f, "json: {err}"),
            ModelError::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for ModelError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ModelError::Io(err) => Some(err),
            ModelError::Json(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for ModelError {
    fn from(err: io::Error) -> Self {
        ModelError::Io(err)
    }
}

impl From<serde_json::Error> for ModelError {
    fn from(err: serde_json::Error) -> Self {
        ModelError::Json(err)
    }
}

type Result<T> = std::result::Result<T, ModelError>;

/// Which architecture to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ModelKind {
    Linear,
    Mlp,
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "mlp" => Ok(ModelKind::Mlp),
            _ => Err(ModelError::Checkpoint(format!("unknown model kind '{s}'"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Linear => write!(f, "linear"),
            ModelKind::Mlp => write!(f, "mlp"),
        }
    }
}

pub const DEFAULT_HIDDEN: usize = 128;

/// `ŷ = W·(x − x_L·1) + b + x_L·1` (the subtraction and re-add are the
/// last-value head and can be disabled).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForecaster {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub last_value_head: bool,
}

/// One hidden gelu layer between the same head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpForecaster {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub last_value_head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearForecaster),
    Mlp(MlpForecaster),
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl Model {
    /// Fan-in uniform init: weights in `[−1/√cols, 1/√cols]`, biases 0.
    pub fn linear<R: Rng + ?Sized>(
        lookback: usize,
        horizon: usize,
        last_value_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        require_dims(lookback, horizon)?;
        Ok(Model::Linear(LinearForecaster {
            w: uniform_matrix(horizon, lookback, rng),
            b: Array1::zeros(horizon),
            last_value_head,
        }))
    }

    pub fn mlp<R: Rng + ?Sized>(
        lookback: usize,
        horizon: usize,
        hidden: usize,
        last_value_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        require_dims(lookback, horizon)?;
        if hidden == 0 {
            return Err(ModelError::InvalidParam { what: "hidden size", value: 0.0 });
        }
        Ok(Model::Mlp(MlpForecaster {
            w1: uniform_matrix(hidden, lookback, rng),
            b1: Array1::zeros(hidden),
            w2: uniform_matrix(horizon, hidden, rng),
            b2: Array1::zeros(horizon),
            last_value_head,
        }))
    }

    pub fn new<R: Rng + ?Sized>(
        kind: ModelKind,
        lookback: usize,
        horizon: usize,
        hidden: usize,
        last_value_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        match kind {
            ModelKind::Linear => Model::linear(lookback, horizon, last_value_head, rng),
            ModelKind::Mlp => Model::mlp(lookback, horizon, hidden, last_value_head, rng),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Linear(_) => ModelKind::Linear,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn lookback(&self) -> usize {
        match self {
            Model::Linear(m) => m.w.ncols(),
            Model::Mlp(m) => m.w1.ncols(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Model::Linear(m) => m.w.nrows(),
            Model::Mlp(m) => m.w2.nrows(),
        }
    }

    pub fn last_value_head(&self) -> bool {
        match self {
            Model::Linear(m) => m.last_value_head,
            Model::Mlp(m) => m.last_value_head,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Model::Linear(m) => m.w.len() + m.b.len(),
            Model::Mlp(m) => m.w1.len() + m.b1.len() + m.w2.len() + m.b2.len(),
        }
    }

    /// Visits every parameter mutably in the checkpoint order (`w`, `b` or
    /// `w1`, `b1`, `w2`, `b2`, each row-major).
    fn for_each_param(&mut self, mut f: impl FnMut(&mut f64)) {
        match self {
            Model::Linear(m) => {
                m.w.iter_mut().for_each(&mut f);
                m.b.iter_mut().for_each(&mut f);
            }
            Model::Mlp(m) => {
                m.w1.iter_mut().for_each(&mut f);
                m.b1.iter_mut().for_each(&mut f);
                m.w2.iter_mut().for_each(&mut f);
                m.b2.iter_mut().for_each(&mut f);
            }
        }
    }

    /// Batched forward pass: one prediction row per input row.
    pub fn forward_batch(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        let lookback = self.lookback();
        if inputs.ncols() != lookback {
            return Err(ModelError::Shape {
                what: "input width",
                expected: lookback,
                got: inputs.ncols(),
            });
        }
        let (centered, last) = self.center(inputs);
        let mut out = match self {
            Model::Linear(m) => centered.dot(&m.w.t()) + &m.b,
            Model::Mlp(m) => {
                let pre = centered.dot(&m.w1.t()) + &m.b1;
                pre.mapv(gelu).dot(&m.w2.t()) + &m.b2
            }
        };
        if let Some(last) = last {
            out += &last.insert_axis(Axis(1));
        }
        Ok(out)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let inputs = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .expect("1-row shape always matches");
        Ok(self.forward_batch(&inputs)?.row(0).to_vec())
    }

    fn center(&self, inputs: &Array2<f64>) -> (Array2<f64>, Option<Array1<f64>>) {
        if self.last_value_head() {
            let last = inputs.column(inputs.ncols() - 1).to_owned();
            let centered = inputs - &last.clone().insert_axis(Axis(1));
            (centered, Some(last))
        } else {
            (inputs.clone(), None)
        }
    }

    /// Per-row `(1/T)·Σ(ŷ − y)²`.
    pub fn per_sample_losses(&self, batch: &Batch) -> Result<Array1<f64>> {
        let pred = self.forward_batch(&batch.inputs)?;
        self.check_targets(batch)?;
        let diff = &pred - &batch.targets;
        Ok(diff.mapv(|d| d * d).mean_axis(Axis(1)).expect("horizon ≥ 1"))
    }

    fn check_targets(&self, batch: &Batch) -> Result<()> {
        if batch.targets.ncols() != self.horizon() {
            return Err(ModelError::Shape {
                what: "target width",
                expected: self.horizon(),
                got: batch.targets.ncols(),
            });
        }
        Ok(())
    }

    /// Gradient of `(1/B)·Σ_i scale_i·loss_i` with respect to every
    /// parameter.
    pub fn gradient(&self, batch: &Batch, scales: &[f64]) -> Result<Gradients> {
        let b_len = batch.len();
        if scales.len() != b_len {
            return Err(ModelError::Shape {
                what: "scale list",
                expected: b_len,
                got: scales.len(),
            });
        }
        for &s in scales {
            if !s.is_finite() || s < 0.0 {
                return Err(ModelError::InvalidParam { what: "sample scale", value: s });
            }
        }
        self.check_targets(batch)?;

        let horizon = self.horizon() as f64;
        let (centered, _) = self.center(&batch.inputs);
        let scale_col =
            Array1::from_iter(scales.iter().map(|&s| 2.0 * s / (b_len as f64 * horizon)))
                .insert_axis(Axis(1));

        match self {
            Model::Linear(_) => {
                let pred = self.forward_batch(&batch.inputs)?;
                let d_out = (&pred - &batch.targets) * &scale_col;
                Ok(Gradients::Linear {
                    dw: d_out.t().dot(&centered),
                    db: d_out.sum_axis(Axis(0)),
                })
            }
            Model::Mlp(m) => {
                let pre = centered.dot(&m.w1.t()) + &m.b1;
                let hidden = pre.mapv(gelu);
                let mut pred = hidden.dot(&m.w2.t()) + &m.b2;
                if m.last_value_head {
                    let last = batch.inputs.column(batch.inputs.ncols() - 1).to_owned();
                    pred += &last.insert_axis(Axis(1));
                }
                let d_out = (&pred - &batch.targets) * &scale_col;
                let d_hidden = d_out.dot(&m.w2);
                let d_pre = d_hidden * pre.mapv(gelu_derivative);
                Ok(Gradients::Mlp {
                    dw1: d_pre.t().dot(&centered),
                    db1: d_pre.sum_axis(Axis(0)),
                    dw2: d_out.t().dot(&hidden),
                    db2: d_out.sum_axis(Axis(0)),
                })
            }
        }
    }
}

fn require_dims(lookback: usize, horizon: usize) -> Result<()> {
    if lookback == 0 {
        return Err(ModelError::InvalidParam { what: "lookback", value: 0.0 });
    }
    if horizon == 0 {
        return Err(ModelError::InvalidParam { what: "horizon", value: 0.0 });
    }
    Ok(())
}

const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh form: `0.5·a·(1 + tanh(√(2/π)·(a + 0.044715·a³)))`.
fn gelu(a: f64) -> f64 {
    0.5 * a * (1.0 + (GELU_K * (a + GELU_C * a * a * a)).tanh())
}

fn gelu_derivative(a: f64) -> f64 {
    let t = (GELU_K * (a + GELU_C * a * a * a)).tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * a * a);
    0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du
}

/// A batch of windows packed into row-major matrices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn from_windows(windows: &[&SampleWindow]) -> Result<Batch> {
        let Some(first) = windows.first() else {
            return Err(ModelError::Shape { what: "batch", expected: 1, got: 0 });
        };
        let lookback = first.input.len();
        let horizon = first.target.len();
        let mut inputs = Array2::zeros((windows.len(), lookback));
        let mut targets = Array2::zeros((windows.len(), horizon));
        for (i, window) in windows.iter().enumerate() {
            if window.input.len() != lookback {
                return Err(ModelError::Shape {
                    what: "window input",
                    expected: lookback,
                    got: window.input.len(),
                });
            }
            if window.target.len() != horizon {
                return Err(ModelError::Shape {
                    what: "window target",
                    expected: horizon,
                    got: window.target.len(),
                });
            }
            inputs.row_mut(i).assign(&Array1::from_vec(window.input.clone()));
            targets.row_mut(i).assign(&Array1::from_vec(window.target.clone()));
        }
        Ok(Batch { inputs, targets })
    }

    /// Packs `windows[ids]` in the given order.
    pub fn gather(windows: &[SampleWindow], ids: &[usize]) -> Result<Batch> {
        let refs: Vec<&SampleWindow> = ids
            .iter()
            .map(|&id| {
                windows.get(id).ok_or(ModelError::Shape {
                    what: "window id",
                    expected: windows.len(),
                    got: id,
                })
            })
            .collect::<Result<_>>()?;
        Batch::from_windows(&refs)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Convenience single-window loss.
pub fn per_sample_loss(model: &Model, window: &SampleWindow) -> Result<f64> {
    let batch = Batch::from_windows(&[window])?;
    Ok(model.per_sample_losses(&batch)?[0])
}

/// Parameter gradients, shaped like the model that produced them.
#[derive(Debug, Clone)]
pub enum Gradients {
    Linear { dw: Array2<f64>, db: Array1<f64> },
    Mlp { dw1: Array2<f64>, db1: Array1<f64>, dw2: Array2<f64>, db2: Array1<f64> },
}

impl Gradients {
    /// Flattens in the same order as `Model::for_each_param`.
    fn flat(&self) -> Vec<f64> {
        match self {
            Gradients::Linear { dw, db } => dw.iter().chain(db.iter()).copied().collect(),
            Gradients::Mlp { dw1, db1, dw2, db2 } => dw1
                .iter()
                .chain(db1.iter())
                .chain(dw2.iter())
                .chain(db2.iter())
                .copied()
                .collect(),
        }
    }
}

/// Optimizer choice with Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum OptKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Learning rate, optimizer kind, and Adam moment buffers. A learning
/// rate of 0 freezes the parameters, which makes loss-probing epochs
/// possible.
#[derive(Debug, Clone)]
pub struct OptimState {
    lr: f64,
    kind: OptKind,
    steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn sgd(lr: f64) -> Result<Self> {
        require_lr(lr)?;
        Ok(OptimState { lr, kind: OptKind::Sgd, steps: 0, m: Vec::new(), v: Vec::new() })
    }

    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn adam(lr: f64) -> Result<Self> {
        require_lr(lr)?;
        Ok(OptimState {
            lr,
            kind: OptKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn kind(&self) -> OptKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

fn require_lr(lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(ModelError::InvalidParam { what: "learning rate", value: lr });
    }
    Ok(())
}

/// Applies one optimizer step in place; the model is untouched on error.
pub fn step(model: &mut Model, grads: &Gradients, opt: &mut OptimState) -> Result<()> {
    let g = grads.flat();
    if g.len() != model.param_count() {
        return Err(ModelError::Shape {
            what: "gradient",
            expected: model.param_count(),
            got: g.len(),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { what: "gradient" });
    }

    match opt.kind {
        OptKind::Sgd => {
            let lr = opt.lr;
            let mut i = 0;
            model.for_each_param(|p| {
                *p -= lr * g[i];
                i += 1;
            });
        }
        OptKind::Adam { beta1, beta2, eps } => {
            if opt.m.is_empty() {
                opt.m = vec![0.0; g.len()];
                opt.v = vec![0.0; g.len()];
            }
            if opt.m.len() != g.len() {
                return Err(ModelError::Shape {
                    what: "adam buffers",
                    expected: opt.m.len(),
                    got: g.len(),
                });
            }
            let t = (opt.steps + 1) as i32;
            let bias1 = 1.0 - beta1.powi(t);
            let bias2 = 1.0 - beta2.powi(t);
            let lr = opt.lr;
            let (m, v) = (&mut opt.m, &mut opt.v);
            let mut i = 0;
            model.for_each_param(|p| {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
                i += 1;
            });
        }
    }
    opt.steps += 1;

    let mut bad = false;
    model.for_each_param(|p| bad |= !p.is_finite());
    if bad {
        return Err(ModelError::NonFinite { what: "updated parameter" });
    }
    Ok(())
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayDoc {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    schema_version: u32,
    kind: String,
    lookback: usize,
    horizon: usize,
    hidden: Option<usize>,
    last_value_head: bool,
    params: BTreeMap<String, ArrayDoc>,
}

fn matrix_doc(a: &Array2<f64>) -> ArrayDoc {
    ArrayDoc { shape: vec![a.nrows(), a.ncols()], data: a.iter().copied().collect() }
}

fn vector_doc(a: &Array1<f64>) -> ArrayDoc {
    ArrayDoc { shape: vec![a.len()], data: a.to_vec() }
}

fn matrix_from_doc(name: &str, doc: &ArrayDoc) -> Result<Array2<f64>> {
    if doc.shape.len() != 2 {
        return Err(ModelError::Checkpoint(format!("{name}: expected a 2-d shape")));
    }
    check_finite(name, &doc.data)?;
    Array2::from_shape_vec((doc.shape[0], doc.shape[1]), doc.data.clone())
        .map_err(|_| ModelError::Checkpoint(format!("{name}: shape does not match data length")))
}

fn vector_from_doc(name: &str, doc: &ArrayDoc) -> Result<Array1<f64>> {
    if doc.shape.len() != 1 || doc.shape[0] != doc.data.len() {
        return Err(ModelError::Checkpoint(format!("{name}: shape does not match data length")));
    }
    check_finite(name, &doc.data)?;
    Ok(Array1::from_vec(doc.data.clone()))
}

fn check_finite(name: &str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Checkpoint(format!("{name}: non-finite parameter")));
    }
    Ok(())
}

/// Writes the model as versioned JSON.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut params = BTreeMap::new();
    let (kind, hidden) = match model {
        Model::Linear(m) => {
            params.insert("w".to_owned(), matrix_doc(&m.w));
            params.insert("b".to_owned(), vector_doc(&m.b));
            ("linear", None)
        }
        Model::Mlp(m) => {
            params.insert("w1".to_owned(), matrix_doc(&m.w1));
            params.insert("b1".to_owned(), vector_doc(&m.b1));
            params.insert("w2".to_owned(), matrix_doc(&m.w2));
            params.insert("b2".to_owned(), vector_doc(&m.b2));
            ("mlp", Some(m.w1.nrows()))
        }
    };
    let doc = CheckpointDoc {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: kind.to_owned(),
        lookback: model.lookback(),
        horizon: model.horizon(),
        hidden,
        last_value_head: model.last_value_head(),
        params,
    };
    let json = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let doc: CheckpointDoc = serde_json::from_str(&text)?;
    if doc.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported schema version {}",
            doc.schema_version
        )));
    }
    let get = |name: &str| {
        doc.params
            .get(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter '{name}'")))
    };
    let model = match doc.kind.as_str() {
        "linear" => Model::Linear(LinearForecaster {
            w: matrix_from_doc("w", get("w")?)?,
            b: vector_from_doc("b", get("b")?)?,
            last_value_head: doc.last_value_head,
        }),
        "mlp" => Model::Mlp(MlpForecaster {
            w1: matrix_from_doc("w1", get("w1")?)?,
            b1: vector_from_doc("b1", get("b1")?)?,
            w2: matrix_from_doc("w2", get("w2")?)?,
            b2: vector_from_doc("b2", get("b2")?)?,
            last_value_head: doc.last_value_head,
        }),
        other => return Err(ModelError::Checkpoint(format!("unknown model kind '{other}'"))),
    };
    if model.lookback() != doc.lookback || model.horizon() != doc.horizon {
        return Err(ModelError::Checkpoint(
            "declared lookback/horizon do not match parameter shapes".to_owned(),
        ));
    }
    Ok(model)
}
