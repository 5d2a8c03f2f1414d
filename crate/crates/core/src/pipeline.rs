//! End-to-end composition: flow series, model training, attribution reports
//! and glyph payloads, shared by the command line and the HTTP service.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    region_shap, top_k_by, trajectory_shap, AttributionError, ExplainConfig, Grouping, RegionAttribution, SplitMode, TargetKind, TargetSpec,
    TrajectoryAttribution, TrajectoryScore,
};
use crate::flow::{build_series, slice_range, CellTrajectoryIndex, Channel, FlowError, FlowTensor};
use crate::ingest::{Cell, GridSpec, IngestError, SnappedTrajectory};
use crate::predictor::{
    fit_linear, mean_window, rollout, training_pairs, FittedModel, GridField, HistoricalAverage, HistoryWindow, LinearConfig, PredictError,
    PredictionTensor,
};
use crate::regions::{build_glyph, RadarGlyphPayload, RegionError, RegionPartition, DEFAULT_SECTORS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("no transitions in the input")]
    NoData,
    #[error("slice {k} outside the available range {first}..={last}")]
    SliceOutOfRange { k: i64, first: i64, last: i64 },
    #[error("{0}")]
    Invalid(String),
}

/// Contiguous per-slice tensors and trajectory indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSeries {
    pub grid: GridSpec,
    pub first: i64,
    pub tensors: Vec<FlowTensor>,
    pub indices: Vec<CellTrajectoryIndex>,
}

impl FlowSeries {
    pub fn build(grid: &GridSpec, trajs: &[SnappedTrajectory]) -> Result<Self, PipelineError> {
        let (first, last) = slice_range(trajs).ok_or(PipelineError::NoData)?;
        Self::build_range(grid, trajs, first, last)
    }

    pub fn build_range(grid: &GridSpec, trajs: &[SnappedTrajectory], first: i64, last: i64) -> Result<Self, PipelineError> {
        let (tensors, indices) = build_series(grid, trajs, first, last)?.into_iter().unzip();
        Ok(Self {
            grid: *grid,
            first,
            tensors,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn last(&self) -> i64 {
        self.first + self.tensors.len() as i64 - 1
    }

    fn position(&self, k: i64) -> Result<usize, PipelineError> {
        if k < self.first || k > self.last() {
            return Err(PipelineError::SliceOutOfRange {
                k,
                first: self.first,
                last: self.last(),
            });
        }
        Ok((k - self.first) as usize)
    }

    pub fn tensor(&self, k: i64) -> Result<&FlowTensor, PipelineError> {
        Ok(&self.tensors[self.position(k)?])
    }

    pub fn fields(&self) -> Vec<GridField> {
        self.tensors.iter().map(GridField::from).collect()
    }

    /// Earliest slice that can close a window of `len` frames.
    pub fn first_window_end(&self, len: usize) -> i64 {
        self.first + len as i64 - 1
    }

    /// History window of slices `k - len + 1 ..= k`.
    pub fn window(&self, k: i64, len: usize) -> Result<HistoryWindow, PipelineError> {
        let end = self.position(k)?;
        if len == 0 || end + 1 < len {
            return Err(PipelineError::SliceOutOfRange {
                k,
                first: self.first_window_end(len),
                last: self.last(),
            });
        }
        Ok(HistoryWindow::new(self.tensors[end + 1 - len..=end].iter().map(GridField::from).collect())?)
    }

    /// Indices feeding each history position of [`FlowSeries::window`].
    pub fn window_indices(&self, k: i64, len: usize) -> Result<Vec<&CellTrajectoryIndex>, PipelineError> {
        let end = self.position(k)?;
        if len == 0 || end + 1 < len {
            return Err(PipelineError::SliceOutOfRange {
                k,
                first: self.first_window_end(len),
                last: self.last(),
            });
        }
        Ok(self.indices[end + 1 - len..=end].iter().collect())
    }

    pub fn training_pairs(&self, history: usize) -> Vec<(HistoryWindow, GridField)> {
        training_pairs(&self.fields(), history)
    }

    /// Elementwise mean over every training input window.
    pub fn background(&self, history: usize) -> Result<HistoryWindow, PipelineError> {
        let pairs = self.training_pairs(history);
        mean_window(pairs.iter().map(|(w, _)| w)).ok_or(PipelineError::Predict(PredictError::TooFewPairs {
            need: 1,
            got: 0,
        }))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Havg,
    #[default]
    Linear,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "havg" => Ok(ModelKind::Havg),
            "linear" => Ok(ModelKind::Linear),
            other => Err(format!("unknown model {other:?} (expected linear|havg)")),
        }
    }
}

pub fn train(series: &FlowSeries, kind: ModelKind, config: LinearConfig) -> Result<FittedModel, PipelineError> {
    let (rows, cols) = (series.grid.rows, series.grid.cols);
    Ok(match kind {
        ModelKind::Havg => FittedModel::Havg {
            predictor: HistoricalAverage::new(config.history),
            rows,
            cols,
        },
        ModelKind::Linear => FittedModel::Linear(fit_linear(&series.training_pairs(config.history), config)?),
    })
}

/// Which cells take part as players under per-cell grouping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scope {
    /// Every grid cell.
    All,
    /// Cells within this Chebyshev distance of any target cell.
    Radius { radius: usize },
    /// Cells of one region of the partition.
    Region { region: usize },
    Cells { cells: Vec<Cell> },
}

impl Default for Scope {
    fn default() -> Self {
        Scope::Radius { radius: 2 }
    }
}

impl Scope {
    pub fn resolve(&self, rows: usize, cols: usize, targets: &[Cell], partition: Option<&RegionPartition>) -> Result<Option<Vec<Cell>>, PipelineError> {
        Ok(match self {
            Scope::All => None,
            Scope::Radius { radius } => {
                let r = *radius;
                let cells = (0..rows)
                    .flat_map(|row| (0..cols).map(move |col| Cell::new(row, col)))
                    .filter(|c| targets.iter().any(|t| c.row.abs_diff(t.row) <= r && c.col.abs_diff(t.col) <= r))
                    .collect();
                Some(cells)
            }
            Scope::Region { region } => {
                let p = partition.ok_or_else(|| PipelineError::Invalid("region scope needs a partition".into()))?;
                p.region(*region)?;
                Some(p.cells_of(*region))
            }
            Scope::Cells { cells } => {
                if let Some(c) = cells.iter().find(|c| c.row >= rows || c.col >= cols) {
                    return Err(PipelineError::Invalid(format!("scope cell ({}, {}) outside the grid", c.row, c.col)));
                }
                Some(cells.clone())
            }
        })
    }
}

fn default_top_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRequest {
    /// Newest slice of the explained input window.
    pub k: i64,
    pub target: TargetKind,
    pub channel: Channel,
    pub horizon: usize,
    pub grouping: Grouping,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub split: SplitMode,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Rank trajectories on one channel's total; the combined total when absent.
    #[serde(default)]
    pub rank_channel: Option<Channel>,
}

impl AttributionRequest {
    pub fn target_spec(&self) -> TargetSpec {
        TargetSpec {
            target: self.target,
            channel: self.channel,
            horizon: self.horizon,
        }
    }
}

/// A trajectory score with the grid coordinates it touches, for fine-grained views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTrajectory {
    pub rank: usize,
    pub score: TrajectoryScore,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub request: AttributionRequest,
    pub attribution: RegionAttribution,
    /// Present for per-cell grouping only.
    pub trajectories: Option<TrajectoryAttribution>,
    pub top: Vec<RankedTrajectory>,
}

impl AttributionReport {
    pub fn top_k(&self, k: usize) -> Vec<TrajectoryScore> {
        self.trajectories
            .as_ref()
            .map(|t| top_k_by(&t.scores, k, self.request.rank_channel))
            .unwrap_or_default()
    }
}

/// Everything an explanation needs, borrowed from a loaded workspace.
#[derive(Clone, Copy)]
pub struct ExplainContext<'a> {
    pub series: &'a FlowSeries,
    pub model: &'a FittedModel,
    pub background: &'a HistoryWindow,
    pub partition: Option<&'a RegionPartition>,
}

impl ExplainContext<'_> {
    pub fn history(&self) -> usize {
        self.model.history_len()
    }

    pub fn input(&self, k: i64) -> Result<HistoryWindow, PipelineError> {
        self.series.window(k, self.history())
    }

    pub fn predict(&self, k: i64, steps: usize) -> Result<Vec<PredictionTensor>, PipelineError> {
        Ok(rollout(self.model.predictor(), &self.input(k)?, steps)?)
    }

    fn cell_region(&self) -> Option<&[usize]> {
        self.partition.map(|p| p.cell_region.as_slice())
    }

    pub fn explain(&self, request: &AttributionRequest) -> Result<AttributionReport, PipelineError> {
        let x = self.input(request.k)?;
        let (rows, cols) = (self.series.grid.rows, self.series.grid.cols);
        let target = request.target_spec();
        let cell_region = self.cell_region();
        let scope = match request.grouping {
            Grouping::PerCell => request.scope.resolve(rows, cols, &target.cells(rows, cols, cell_region)?, self.partition)?,
            _ => None,
        };
        let attribution = region_shap(
            self.model.predictor(),
            &x,
            self.background,
            &target,
            request.grouping,
            cell_region,
            scope.as_deref(),
            &request.explain,
        )?;

        let (trajectories, top) = if attribution.space.is_per_cell() {
            let indices = self.series.window_indices(request.k, self.history())?;
            let t = trajectory_shap(&attribution, &indices, request.split)?;
            let top = top_k_by(&t.scores, request.top_k, request.rank_channel)
                .into_iter()
                .enumerate()
                .map(|(i, score)| {
                    let cells = trajectory_cells(&score, &indices);
                    RankedTrajectory { rank: i + 1, score, cells }
                })
                .collect();
            (Some(t), top)
        } else {
            (None, Vec::new())
        };
        Ok(AttributionReport {
            request: request.clone(),
            attribution,
            trajectories,
            top,
        })
    }

    /// One glyph per region for the window ending at `k`, explaining each
    /// region's own value at `horizon` over merged region players.
    pub fn glyphs(&self, k: i64, horizon: usize, channel: Channel, steps: usize, explain: &ExplainConfig) -> Result<Vec<RadarGlyphPayload>, PipelineError> {
        let partition = self.partition.ok_or_else(|| PipelineError::Invalid("glyphs need a partition".into()))?;
        if horizon == 0 || horizon > steps {
            return Err(PipelineError::Invalid(format!("horizon must be within 1..={steps}")));
        }
        let current = GridField::from(self.series.tensor(k)?);
        let predictions = self.predict(k, steps)?;
        partition
            .regions
            .iter()
            .filter(|r| !partition.cells_of(r.id).is_empty())
            .map(|r| self.glyph(partition, r.id, channel, horizon, &current, &predictions, k, explain))
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn glyph(
        &self,
        partition: &RegionPartition,
        region: usize,
        channel: Channel,
        horizon: usize,
        current: &GridField,
        predictions: &[PredictionTensor],
        k: i64,
        explain: &ExplainConfig,
    ) -> Result<RadarGlyphPayload, PipelineError> {
        let request = AttributionRequest {
            k,
            target: TargetKind::Region { region },
            channel,
            horizon,
            grouping: Grouping::PerRegionMerged,
            scope: Scope::All,
            explain: *explain,
            split: SplitMode::Equal,
            top_k: 0,
            rank_channel: None,
        };
        let report = self.explain(&request)?;
        let neighbor_phi: BTreeMap<usize, f64> = partition
            .neighbors(region)
            .iter()
            .filter_map(|&n| report.attribution.phi_of(&format!("r{n}")).map(|phi| (n, phi)))
            .collect();
        Ok(build_glyph(partition, region, channel, current, predictions, &neighbor_phi, horizon, DEFAULT_SECTORS)?)
    }
}

/// Cells whose index lists the trajectory in any of `indices`, sorted.
pub fn trajectory_cells(score: &TrajectoryScore, indices: &[&CellTrajectoryIndex]) -> Vec<Cell> {
    let mut cells: Vec<Cell> = indices
        .iter()
        .flat_map(|idx| {
            idx.entries
                .iter()
                .filter(|(_, list)| list.iter().any(|(id, _)| *id == score.trajectory_id))
                .map(|(key, _)| key.cell)
        })
        .collect();
    cells.sort();
    cells.dedup();
    cells
}

/// Per-cell current values and predicted series of one region, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrids {
    pub region_id: usize,
    pub k: i64,
    pub channel: Channel,
    pub cells: Vec<Cell>,
    /// `series[i]` is the current value then one value per step for `cells[i]`.
    pub series: Vec<Vec<f64>>,
}

pub fn region_grids(ctx: &ExplainContext<'_>, region: usize, k: i64, channel: Channel, steps: usize) -> Result<RegionGrids, PipelineError> {
    let partition = ctx.partition.ok_or_else(|| PipelineError::Invalid("region grids need a partition".into()))?;
    partition.region(region)?;
    let current = GridField::from(ctx.series.tensor(k)?);
    let predictions = ctx.predict(k, steps)?;
    let cells = partition.cells_of(region);
    let series = cells
        .iter()
        .map(|&c| std::iter::once(current.get(channel, c)).chain(predictions.iter().map(|p| p.values.get(channel, c))).collect())
        .collect();
    Ok(RegionGrids {
        region_id: region,
        k,
        channel,
        cells,
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_trajectories, snap_all, write_trajectories, ColumnMapping};
    use crate::regions::{kmeans, partition};
    use crate::synthkit::{generate, planted_routes_scenario};

    fn workspace() -> (FlowSeries, FittedModel, HistoryWindow, RegionPartition) {
        let scenario = planted_routes_scenario(4);
        let out = generate(&scenario).unwrap();
        let mut csv = Vec::new();
        write_trajectories(&mut csv, &out.records).unwrap();
        let parsed = parse_trajectories(&csv[..], &ColumnMapping::default()).unwrap();
        let snapped = snap_all(&parsed, &scenario.grid).unwrap().trajectories;
        let series = FlowSeries::build(&scenario.grid, &snapped).unwrap();
        let model = train(&series, ModelKind::Linear, LinearConfig::default()).unwrap();
        let bg = series.background(5).unwrap();
        let c = kmeans(&out.intersections, 6, 1).unwrap();
        let p = partition(&out.intersections, &c, &scenario.grid).unwrap();
        (series, model, bg, p)
    }

    #[test]
    fn series_windows() {
        let (series, ..) = workspace();
        assert_eq!(series.first, 0);
        let w = series.window(10, 5).unwrap();
        assert_eq!(w.frames[4], GridField::from(series.tensor(10).unwrap()));
        assert_eq!(w.frames[0], GridField::from(series.tensor(6).unwrap()));
        assert!(series.window(3, 5).is_err());
        assert!(matches!(series.window(series.last() + 1, 5), Err(PipelineError::SliceOutOfRange { .. })));
        assert_eq!(series.window_indices(10, 5).unwrap()[4].slice, 10);
    }

    #[test]
    fn report_conserves_attribution() {
        let (series, model, bg, p) = workspace();
        let ctx = ExplainContext {
            series: &series,
            model: &model,
            background: &bg,
            partition: Some(&p),
        };
        let req = AttributionRequest {
            k: 44,
            target: TargetKind::Cell { row: 6, col: 6 },
            channel: Channel::In,
            horizon: 1,
            grouping: Grouping::PerCell,
            scope: Scope::Radius { radius: 1 },
            explain: ExplainConfig::default(),
            split: SplitMode::Equal,
            top_k: 5,
            rank_channel: None,
        };
        let report = ctx.explain(&req).unwrap();
        assert_eq!(report.attribution.space.len(), 90);
        assert!(report.attribution.result.efficiency_residual().abs() < 1e-9);
        let t = report.trajectories.as_ref().unwrap();
        let phi: f64 = report.attribution.result.phi.iter().sum();
        let assigned: f64 = t.scores.iter().map(|s| s.total).sum::<f64>() + t.residual;
        assert!((phi - assigned).abs() < 1e-9);
        assert_eq!(report.top.len(), 5);
        assert_eq!(report.top[0].rank, 1);
        assert!(!report.top[0].cells.is_empty());
    }

    #[test]
    fn glyphs_and_region_grids() {
        let (series, model, bg, p) = workspace();
        let ctx = ExplainContext {
            series: &series,
            model: &model,
            background: &bg,
            partition: Some(&p),
        };
        let glyphs = ctx.glyphs(44, 2, Channel::In, 6, &ExplainConfig::default()).unwrap();
        assert!(!glyphs.is_empty());
        for g in &glyphs {
            assert_eq!(g.series.len(), 7);
            let neighbor_sum: f64 = g.neighbor_sectors.len() as f64;
            assert!(neighbor_sum <= p.neighbors(g.region_id).len() as f64);
        }
        let grids = region_grids(&ctx, glyphs[0].region_id, 44, Channel::In, 6).unwrap();
        assert!(grids.series.iter().all(|s| s.len() == 7));
        assert!((grids.series.iter().map(|s| s[0]).sum::<f64>() - glyphs[0].series[0]).abs() < 1e-9);
        assert!(ctx.glyphs(44, 7, Channel::In, 6, &ExplainConfig::default()).is_err());
    }
}
