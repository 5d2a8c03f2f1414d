use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use flowlens_core::attribution::{AttributionError, TrajectoryScore};
use flowlens_core::flow::Channel;
use flowlens_core::ingest::{Cell, GridSpec};
use flowlens_core::pipeline::{region_grids, trajectory_cells, AttributionReport, AttributionRequest, PipelineError, RegionGrids};
use flowlens_core::regions::{RadarGlyphPayload, RegionError};
use flowlens_core::store::Snapshot;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::jobs::{Job, JobKind, JobState};
use crate::AppState;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::SliceOutOfRange { .. }
            | PipelineError::Invalid(_)
            | PipelineError::Attribution(AttributionError::InvalidTarget(_))
            | PipelineError::Attribution(AttributionError::InvalidFeatures(_))
            | PipelineError::Region(RegionError::UnknownRegion(_)) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn published(state: &AppState, dataset: Option<&str>) -> Result<Arc<Snapshot>, ApiError> {
    let snap = state
        .snapshot()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no snapshot published"))?;
    match dataset {
        Some(d) if d != snap.dataset => Err(ApiError::not_found(format!("unknown dataset {d:?}"))),
        _ => Ok(snap),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

#[derive(Debug, Deserialize)]
pub struct DatasetQuery {
    pub dataset: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Geometry {
    pub dataset: String,
    pub grid: GridSpec,
    pub regions: usize,
    /// GeoJSON FeatureCollection, absent when no partition was built.
    pub partition: Option<Value>,
}

pub async fn geometry(State(state): State<AppState>, Query(q): Query<DatasetQuery>) -> ApiResult<Geometry> {
    let snap = published(&state, q.dataset.as_deref())?;
    Ok(Json(Geometry {
        dataset: snap.dataset.clone(),
        grid: snap.grid,
        regions: snap.partition.as_ref().map_or(0, |p| p.regions.len()),
        partition: snap.partition.as_ref().map(|p| p.to_geojson()),
    }))
}

#[derive(Debug, Deserialize)]
pub struct FlowQuery {
    pub k: i64,
    pub dataset: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FlowPayload {
    pub k: i64,
    /// `[2, rows, cols]`.
    pub dims: [usize; 3],
    /// `values[channel][row][col]`, channel 0 is in-flow.
    pub values: Vec<Vec<Vec<u32>>>,
}

pub async fn flows(State(state): State<AppState>, Query(q): Query<FlowQuery>) -> ApiResult<FlowPayload> {
    let snap = published(&state, q.dataset.as_deref())?;
    let t = snap.series.tensor(q.k)?;
    Ok(Json(FlowPayload {
        k: q.k,
        dims: [2, t.rows, t.cols],
        values: t.nested(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct PredictQuery {
    pub k: i64,
    pub steps: Option<usize>,
    pub dataset: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictedFrame {
    pub horizon: usize,
    /// Raw model output; negative values are left for the client to clamp.
    pub values: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictPayload {
    /// Newest slice of the input window.
    pub k: i64,
    pub dims: [usize; 3],
    pub predictions: Vec<PredictedFrame>,
}

pub async fn predict(State(state): State<AppState>, Query(q): Query<PredictQuery>) -> ApiResult<PredictPayload> {
    let snap = published(&state, q.dataset.as_deref())?;
    let steps = q.steps.unwrap_or(state.config.steps);
    if steps == 0 {
        return Err(ApiError::bad_request("steps must be >= 1"));
    }
    let k = q.k;
    let frames = blocking(move || Ok(snap.context().predict(k, steps)?)).await?;
    let (rows, cols) = frames[0].values.dims();
    Ok(Json(PredictPayload {
        k,
        dims: [2, rows, cols],
        predictions: frames
            .iter()
            .map(|p| PredictedFrame {
                horizon: p.horizon,
                values: p.values.nested(),
            })
            .collect(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Submitted {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
}

fn check_request(snap: &Snapshot, request: &AttributionRequest) -> Result<(), ApiError> {
    let ctx = snap.context();
    ctx.input(request.k)?;
    let (rows, cols) = (snap.grid.rows, snap.grid.cols);
    let cell_region = snap.partition.as_ref().map(|p| p.cell_region.as_slice());
    let targets = request
        .target_spec()
        .cells(rows, cols, cell_region)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    request.scope.resolve(rows, cols, &targets, snap.partition.as_ref())?;
    if request.top_k == 0 && JobKind::of(request) == JobKind::TrajectoryShap {
        return Err(ApiError::bad_request("top_k must be >= 1"));
    }
    Ok(())
}

pub async fn submit_attribution(
    State(state): State<AppState>,
    Json(request): Json<AttributionRequest>,
) -> Result<(StatusCode, Json<Submitted>), ApiError> {
    let snap = published(&state, None)?;
    check_request(&snap, &request)?;
    let job = state.jobs.submit(request, snap);
    state.spawn_job(job.id.clone());
    Ok((
        StatusCode::ACCEPTED,
        Json(Submitted {
            id: job.id,
            kind: job.kind,
            state: job.state,
        }),
    ))
}

#[derive(Debug, Serialize)]
pub struct JobView<'a> {
    pub id: &'a str,
    pub kind: JobKind,
    pub state: JobState,
    pub params: &'a AttributionRequest,
    pub dataset: &'a str,
    pub created: f64,
    pub started: Option<f64>,
    pub finished: Option<f64>,
    pub error: Option<&'a str>,
    pub efficiency_residual: Option<f64>,
    pub result: Option<&'a AttributionReport>,
}

fn job(state: &AppState, id: &str) -> Result<Job, ApiError> {
    state.jobs.get(id).ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))
}

pub async fn get_attribution(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let job = job(&state, &id)?;
    let view = JobView {
        id: &job.id,
        kind: job.kind,
        state: job.state,
        params: &job.params,
        dataset: &job.snapshot.dataset,
        created: job.created,
        started: job.started,
        finished: job.finished,
        error: job.error.as_deref(),
        efficiency_residual: job.result.as_ref().map(|r| r.attribution.result.efficiency_residual()),
        result: job.result.as_deref(),
    };
    Ok(Json(serde_json::to_value(view).expect("job view serializes")))
}

#[derive(Debug, Deserialize)]
pub struct TopQuery {
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGeo {
    pub row: usize,
    pub col: usize,
    pub lon: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub rank: usize,
    #[serde(flatten)]
    pub score: TrajectoryScore,
    /// Cells whose flow this trajectory contributes to in the explained window.
    pub cells: Vec<CellGeo>,
    /// Visited cell centres in order, `[lon, lat]`.
    pub path: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopTrajectories {
    pub job_id: String,
    pub k: usize,
    pub rank_channel: Option<Channel>,
    /// Slices of the explained window, oldest first (time channel order).
    pub window: Vec<i64>,
    pub residual: f64,
    pub trajectories: Vec<TrajectoryRow>,
}

pub async fn top_trajectories(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<TopQuery>,
) -> ApiResult<TopTrajectories> {
    let job = job(&state, &id)?;
    let k = q.k.unwrap_or(5);
    if k == 0 {
        return Err(ApiError::bad_request("k must be >= 1"));
    }
    let report = match (job.state, &job.result) {
        (JobState::Done, Some(r)) => r.clone(),
        (JobState::Failed, _) => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("job {id} failed: {}", job.error.unwrap_or_default()),
            ))
        }
        (s, _) => return Err(ApiError::new(StatusCode::CONFLICT, format!("job {id} is {s:?}"))),
    };
    let Some(traj) = report.trajectories.as_ref() else {
        return Err(ApiError::bad_request(format!("job {id} used region grouping; trajectories need per-cell grouping")));
    };
    let snap = job.snapshot.clone();
    let history = snap.model.history_len();
    let indices = snap.series.window_indices(report.request.k, history)?;
    let first = report.request.k + 1 - history as i64;
    let trajectories = report
        .top_k(k)
        .into_iter()
        .enumerate()
        .map(|(i, score)| {
            let cells = trajectory_cells(&score, &indices)
                .into_iter()
                .map(|c: Cell| {
                    let (lon, lat) = snap.grid.cell_center(c);
                    CellGeo {
                        row: c.row,
                        col: c.col,
                        lon,
                        lat,
                    }
                })
                .collect();
            let path = snap.path(&score.trajectory_id, first, report.request.k);
            TrajectoryRow {
                rank: i + 1,
                score,
                cells,
                path,
            }
        })
        .collect();
    Ok(Json(TopTrajectories {
        job_id: id,
        k,
        rank_channel: report.request.rank_channel,
        window: (first..=report.request.k).collect(),
        residual: traj.residual,
        trajectories,
    }))
}

#[derive(Debug, Deserialize)]
pub struct GlyphQuery {
    pub k: i64,
    pub horizon: usize,
    pub channel: Option<Channel>,
    pub dataset: Option<String>,
}

pub async fn glyphs(State(state): State<AppState>, Query(q): Query<GlyphQuery>) -> ApiResult<Vec<RadarGlyphPayload>> {
    let snap = published(&state, q.dataset.as_deref())?;
    let steps = state.config.steps;
    let explain = state.config.glyph_explain;
    let channel = q.channel.unwrap_or(Channel::In);
    let glyphs = blocking(move || Ok(snap.context().glyphs(q.k, q.horizon, channel, steps, &explain)?)).await?;
    Ok(Json(glyphs))
}

#[derive(Debug, Deserialize)]
pub struct GridsQuery {
    pub k: i64,
    pub channel: Option<Channel>,
    pub dataset: Option<String>,
}

pub async fn region_grid(
    State(state): State<AppState>,
    Path(region): Path<usize>,
    Query(q): Query<GridsQuery>,
) -> ApiResult<RegionGrids> {
    let snap = published(&state, q.dataset.as_deref())?;
    let partition = snap
        .partition
        .as_ref()
        .ok_or_else(|| ApiError::not_found("snapshot has no region partition"))?;
    if partition.region(region).is_err() {
        return Err(ApiError::not_found(format!("unknown region {region}")));
    }
    let steps = state.config.steps;
    let channel = q.channel.unwrap_or(Channel::In);
    let grids = blocking(move || Ok(region_grids(&snap.context(), region, q.k, channel, steps)?)).await?;
    Ok(Json(grids))
}
