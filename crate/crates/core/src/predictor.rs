//! Black-box flow predictor contract plus two baselines.
//!
//! Anything implementing [`Predictor`] can be explained by the attribution
//! layer; it only has to map a history window of `2 x M x N` fields to the
//! next field, deterministically.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{Channel, FlowTensor};
use crate::ingest::Cell;

#[derive(Debug, Error, PartialEq)]
pub enum PredictError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("need at least {need} training pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("history window has {got} frames, predictor expects {expected}")]
    HistoryLength { expected: usize, got: usize },
    #[error("dims mismatch: expected {expected:?}, got {got:?}")]
    Dims { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("linear system for output {0} could not be solved")]
    Solve(usize),
    #[error("non-finite prediction")]
    NonFinite,
    #[error("model artifact: {0}")]
    Artifact(String),
}

/// Real-valued `[channel][row][col]` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![v; 2 * rows * cols],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn offset(&self, channel: Channel, cell: Cell) -> usize {
        (channel.index() * self.rows + cell.row) * self.cols + cell.col
    }

    pub fn get(&self, channel: Channel, cell: Cell) -> f64 {
        self.values[self.offset(channel, cell)]
    }

    pub fn set(&mut self, channel: Channel, cell: Cell, v: f64) {
        let i = self.offset(channel, cell);
        self.values[i] = v;
    }

    pub fn nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..2)
            .map(|c| {
                (0..self.rows)
                    .map(|r| {
                        let start = (c * self.rows + r) * self.cols;
                        self.values[start..start + self.cols].to_vec()
                    })
                    .collect()
            })
            .collect()
    }

    /// Copy with negative values clamped to zero, for display only.
    pub fn clamped(&self) -> GridField {
        GridField {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v.max(0.0)).collect(),
        }
    }
}

impl From<&FlowTensor> for GridField {
    fn from(t: &FlowTensor) -> Self {
        GridField {
            rows: t.rows,
            cols: t.cols,
            values: t.counts.iter().map(|&c| c as f64).collect(),
        }
    }
}

/// Consecutive history frames, oldest first (time channel 0 is the oldest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    pub frames: Vec<GridField>,
}

impl HistoryWindow {
    pub const DEFAULT_LEN: usize = 5;

    pub fn new(frames: Vec<GridField>) -> Result<Self, PredictError> {
        let first = frames.first().ok_or(PredictError::EmptyDataset)?;
        let dims = first.dims();
        if let Some(bad) = frames.iter().find(|f| f.dims() != dims) {
            return Err(PredictError::Dims {
                expected: dims,
                got: bad.dims(),
            });
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map(GridField::dims).unwrap_or((0, 0))
    }

    pub fn latest(&self) -> &GridField {
        self.frames.last().expect("nonempty window")
    }

    /// Window advanced by one step: drops the oldest frame, appends `next`.
    pub fn advanced(&self, next: GridField) -> HistoryWindow {
        let mut frames: Vec<GridField> = self.frames.iter().skip(1).cloned().collect();
        frames.push(next);
        HistoryWindow { frames }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTensor {
    pub horizon: usize,
    pub values: GridField,
}

/// Deterministic map from a history window to the next field.
pub trait Predictor: Send + Sync {
    /// Number of history frames consumed.
    fn history_len(&self) -> usize;

    fn predict(&self, window: &HistoryWindow) -> Result<GridField, PredictError>;
}

fn check_history(window: &HistoryWindow, expected: usize) -> Result<(), PredictError> {
    if window.len() != expected {
        return Err(PredictError::HistoryLength {
            expected,
            got: window.len(),
        });
    }
    Ok(())
}

/// Elementwise mean of the history frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoricalAverage {
    pub history: usize,
}

impl HistoricalAverage {
    pub fn new(history: usize) -> Self {
        Self { history }
    }
}

pub fn predict_historical_average(history: &HistoryWindow) -> Result<GridField, PredictError> {
    let first = history.frames.first().ok_or(PredictError::EmptyDataset)?;
    let mut out = GridField::zeros(first.rows, first.cols);
    for f in &history.frames {
        for (o, v) in out.values.iter_mut().zip(&f.values) {
            *o += v;
        }
    }
    let n = history.len() as f64;
    out.values.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

impl Predictor for HistoricalAverage {
    fn history_len(&self) -> usize {
        self.history
    }

    fn predict(&self, window: &HistoryWindow) -> Result<GridField, PredictError> {
        check_history(window, self.history)?;
        predict_historical_average(window)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    /// Ridge penalty on the non-intercept coefficients.
    pub lambda: f64,
    /// Neighborhood radius in cells; `(2r + 1)^2` cells feed each output.
    pub radius: usize,
    pub history: usize,
    pub intercept: bool,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            radius: 1,
            history: HistoryWindow::DEFAULT_LEN,
            intercept: true,
        }
    }
}

/// Windowed ridge regression, one coefficient vector per output entry.
///
/// Inputs for output `(c, m, n)` are ordered `[tau][channel][dr][dc]` over
/// the `(2r+1)^2` neighborhood, zero-padded outside the grid, followed by the
/// intercept when enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub config: LinearConfig,
    pub rows: usize,
    pub cols: usize,
    /// `2 * rows * cols` blocks of `feature_count()` coefficients.
    pub weights: Vec<f64>,
}

impl LinearPredictor {
    pub fn feature_count_for(config: &LinearConfig) -> usize {
        let side = 2 * config.radius + 1;
        config.history * 2 * side * side + config.intercept as usize
    }

    pub fn feature_count(&self) -> usize {
        Self::feature_count_for(&self.config)
    }

    pub fn output_count(&self) -> usize {
        2 * self.rows * self.cols
    }

    /// Coefficients of output `(channel, cell)`.
    pub fn coefficients(&self, channel: Channel, cell: Cell) -> &[f64] {
        let o = (channel.index() * self.rows + cell.row) * self.cols + cell.col;
        let f = self.feature_count();
        &self.weights[o * f..(o + 1) * f]
    }

    /// Coefficient linking input `(tau, in_channel, in_cell)` to output
    /// `(out_channel, out_cell)`; zero outside the neighborhood.
    pub fn coefficient(&self, out_channel: Channel, out_cell: Cell, tau: usize, in_channel: Channel, in_cell: Cell) -> f64 {
        let r = self.config.radius as i64;
        let dr = in_cell.row as i64 - out_cell.row as i64;
        let dc = in_cell.col as i64 - out_cell.col as i64;
        if dr.abs() > r || dc.abs() > r || tau >= self.config.history {
            return 0.0;
        }
        let side = (2 * r + 1) as usize;
        let idx = ((tau * 2 + in_channel.index()) * side + (dr + r) as usize) * side + (dc + r) as usize;
        self.coefficients(out_channel, out_cell)[idx]
    }

    /// Intercept of one output, zero when disabled.
    pub fn intercept(&self, channel: Channel, cell: Cell) -> f64 {
        if self.config.intercept {
            *self.coefficients(channel, cell).last().unwrap()
        } else {
            0.0
        }
    }
}

fn design_row(config: &LinearConfig, window: &HistoryWindow, row: usize, col: usize, out: &mut Vec<f64>) {
    out.clear();
    let (rows, cols) = window.dims();
    let r = config.radius as i64;
    for frame in &window.frames {
        for ch in Channel::ALL {
            for dr in -r..=r {
                for dc in -r..=r {
                    let rr = row as i64 + dr;
                    let cc = col as i64 + dc;
                    let v = if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        0.0
                    } else {
                        frame.get(ch, Cell::new(rr as usize, cc as usize))
                    };
                    out.push(v);
                }
            }
        }
    }
    if config.intercept {
        out.push(1.0);
    }
}

/// Fits one ridge system per output entry.
pub fn fit_linear(dataset: &[(HistoryWindow, GridField)], config: LinearConfig) -> Result<LinearPredictor, PredictError> {
    if dataset.is_empty() {
        return Err(PredictError::EmptyDataset);
    }
    if dataset.len() < 2 {
        return Err(PredictError::TooFewPairs {
            need: 2,
            got: dataset.len(),
        });
    }
    if !(config.lambda.is_finite() && config.lambda >= 0.0) {
        return Err(PredictError::InvalidParameter("lambda must be finite and >= 0".into()));
    }
    if config.history == 0 {
        return Err(PredictError::InvalidParameter("history must be >= 1".into()));
    }
    let dims = dataset[0].1.dims();
    for (w, y) in dataset {
        check_history(w, config.history)?;
        for got in [w.dims(), y.dims()] {
            if got != dims {
                return Err(PredictError::Dims { expected: dims, got });
            }
        }
    }
    let (rows, cols) = dims;
    let nf = LinearPredictor::feature_count_for(&config);
    let outputs = 2 * rows * cols;

    let blocks: Result<Vec<Vec<f64>>, PredictError> = (0..outputs)
        .into_par_iter()
        .map(|o| {
            let ch = Channel::from_index(o / (rows * cols));
            let cell = Cell::new((o / cols) % rows, o % cols);
            let mut gram = DMatrix::<f64>::zeros(nf, nf);
            let mut rhs = DVector::<f64>::zeros(nf);
            let mut x = Vec::with_capacity(nf);
            for (w, y) in dataset {
                design_row(&config, w, cell.row, cell.col, &mut x);
                let target = y.get(ch, cell);
                for i in 0..nf {
                    if x[i] == 0.0 {
                        continue;
                    }
                    rhs[i] += x[i] * target;
                    for j in 0..nf {
                        gram[(i, j)] += x[i] * x[j];
                    }
                }
            }
            let penalized = nf - config.intercept as usize;
            for i in 0..penalized {
                gram[(i, i)] += config.lambda;
            }
            solve_normal(gram, rhs, config.lambda > 0.0)
                .map(|v| v.iter().copied().collect())
                .ok_or(PredictError::Solve(o))
        })
        .collect();

    Ok(LinearPredictor {
        config,
        rows,
        cols,
        weights: blocks?.concat(),
    })
}

/// Cholesky when the system is known positive definite, otherwise a
/// minimum-norm solve through the symmetric eigendecomposition.
fn solve_normal(gram: DMatrix<f64>, rhs: DVector<f64>, definite: bool) -> Option<DVector<f64>> {
    if definite {
        if let Some(ch) = gram.clone().cholesky() {
            return Some(ch.solve(&rhs));
        }
    }
    let eig = gram.symmetric_eigen();
    let emax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if emax == 0.0 {
        return Some(DVector::zeros(rhs.len()));
    }
    let cutoff = emax * 1e-12 * rhs.len() as f64;
    let proj = eig.eigenvectors.transpose() * &rhs;
    let scaled = DVector::from_iterator(
        proj.len(),
        proj.iter().zip(eig.eigenvalues.iter()).map(|(p, &e)| if e > cutoff { p / e } else { 0.0 }),
    );
    let w = &eig.eigenvectors * scaled;
    w.iter().all(|v| v.is_finite()).then_some(w)
}

impl Predictor for LinearPredictor {
    fn history_len(&self) -> usize {
        self.config.history
    }

    fn predict(&self, window: &HistoryWindow) -> Result<GridField, PredictError> {
        check_history(window, self.config.history)?;
        if window.dims() != (self.rows, self.cols) {
            return Err(PredictError::Dims {
                expected: (self.rows, self.cols),
                got: window.dims(),
            });
        }
        let nf = self.feature_count();
        let mut out = GridField::zeros(self.rows, self.cols);
        let mut x = Vec::with_capacity(nf);
        for ch in Channel::ALL {
            for row in 0..self.rows {
                for col in 0..self.cols {
                    design_row(&self.config, window, row, col, &mut x);
                    let w = self.coefficients(ch, Cell::new(row, col));
                    let v: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
                    if !v.is_finite() {
                        return Err(PredictError::NonFinite);
                    }
                    out.set(ch, Cell::new(row, col), v);
                }
            }
        }
        Ok(out)
    }
}

/// Recursive multi-step forecast: each prediction is fed back as the newest frame.
pub fn rollout(predictor: &dyn Predictor, history: &HistoryWindow, steps: usize) -> Result<Vec<PredictionTensor>, PredictError> {
    if steps == 0 {
        return Err(PredictError::InvalidParameter("steps must be >= 1".into()));
    }
    let mut window = history.clone();
    let mut out = Vec::with_capacity(steps);
    for h in 1..=steps {
        let next = predictor.predict(&window)?;
        if h < steps {
            window = window.advanced(next.clone());
        }
        out.push(PredictionTensor { horizon: h, values: next });
    }
    Ok(out)
}

/// Training pairs `(frames[i-L+1..=i], frames[i+1])` from a contiguous series.
pub fn training_pairs(series: &[GridField], history: usize) -> Vec<(HistoryWindow, GridField)> {
    if history == 0 || series.len() <= history {
        return Vec::new();
    }
    (history - 1..series.len() - 1)
        .map(|i| {
            (
                HistoryWindow {
                    frames: series[i + 1 - history..=i].to_vec(),
                },
                series[i + 1].clone(),
            )
        })
        .collect()
}

/// Elementwise mean window over a set of windows; the default attribution background.
pub fn mean_window<'a>(windows: impl IntoIterator<Item = &'a HistoryWindow>) -> Option<HistoryWindow> {
    let mut acc: Option<HistoryWindow> = None;
    let mut n = 0usize;
    for w in windows {
        n += 1;
        match &mut acc {
            None => acc = Some(w.clone()),
            Some(a) => {
                for (fa, fw) in a.frames.iter_mut().zip(&w.frames) {
                    for (x, y) in fa.values.iter_mut().zip(&fw.values) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut acc = acc?;
    for f in &mut acc.frames {
        f.values.iter_mut().for_each(|v| *v /= n as f64);
    }
    Some(acc)
}

/// Mean squared error of one-step predictions over a dataset.
pub fn training_mse(predictor: &dyn Predictor, dataset: &[(HistoryWindow, GridField)]) -> Result<f64, PredictError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (w, y) in dataset {
        let p = predictor.predict(w)?;
        for (a, b) in p.values.iter().zip(&y.values) {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Serializable description of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelMeta {
    Havg {
        history: usize,
        rows: usize,
        cols: usize,
    },
    Linear {
        radius: usize,
        lambda: f64,
        history: usize,
        intercept: bool,
        rows: usize,
        cols: usize,
        features: usize,
    },
}

/// A fitted baseline model in a form that can be persisted.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Havg { predictor: HistoricalAverage, rows: usize, cols: usize },
    Linear(LinearPredictor),
}

impl FittedModel {
    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            FittedModel::Havg { predictor, .. } => predictor,
            FittedModel::Linear(p) => p,
        }
    }

    pub fn meta(&self) -> ModelMeta {
        match self {
            FittedModel::Havg { predictor, rows, cols } => ModelMeta::Havg {
                history: predictor.history,
                rows: *rows,
                cols: *cols,
            },
            FittedModel::Linear(p) => ModelMeta::Linear {
                radius: p.config.radius,
                lambda: p.config.lambda,
                history: p.config.history,
                intercept: p.config.intercept,
                rows: p.rows,
                cols: p.cols,
                features: p.feature_count(),
            },
        }
    }

    /// Little-endian f64 parameter payload (empty for the average baseline).
    pub fn params_le_bytes(&self) -> Vec<u8> {
        match self {
            FittedModel::Havg { .. } => Vec::new(),
            FittedModel::Linear(p) => p.weights.iter().flat_map(|w| w.to_le_bytes()).collect(),
        }
    }

    pub fn from_parts(meta: &ModelMeta, params: &[u8]) -> Result<Self, PredictError> {
        match *meta {
            ModelMeta::Havg { history, rows, cols } => Ok(FittedModel::Havg {
                predictor: HistoricalAverage::new(history),
                rows,
                cols,
            }),
            ModelMeta::Linear {
                radius,
                lambda,
                history,
                intercept,
                rows,
                cols,
                features,
            } => {
                let config = LinearConfig {
                    lambda,
                    radius,
                    history,
                    intercept,
                };
                if LinearPredictor::feature_count_for(&config) != features {
                    return Err(PredictError::Artifact("feature count does not match config".into()));
                }
                let expected = 2 * rows * cols * features * 8;
                if params.len() != expected {
                    return Err(PredictError::Artifact(format!(
                        "expected {expected} parameter bytes, got {}",
                        params.len()
                    )));
                }
                let weights = params
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(FittedModel::Linear(LinearPredictor {
                    config,
                    rows,
                    cols,
                    weights,
                }))
            }
        }
    }

    pub fn history_len(&self) -> usize {
        self.predictor().history_len()
    }
}
