//! HTTP/JSON API over a published flowlens snapshot.
//!
//! | route | method | body |
//! |---|---|---|
//! | `/api/geometry` | GET | grid spec and region GeoJSON |
//! | `/api/flows?k=` | GET | flow tensor of slice `k` |
//! | `/api/predict?k=&steps=` | GET | rolled-out predictions from the window ending at `k` |
//! | `/api/attribution` | POST | submit an attribution job |
//! | `/api/attribution/{id}` | GET | job state and result |
//! | `/api/attribution/{id}/trajectories?k=` | GET | top-k trajectories with per-time-channel sums and geometry |
//! | `/api/glyphs?k=&horizon=` | GET | one radar glyph per region |
//! | `/api/region/{id}/grids?k=` | GET | per-cell current and predicted series, row-major |

pub mod api;
pub mod config;
pub mod jobs;

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::routing::{get, post};
use axum::Router;
use flowlens_core::store::Snapshot;
use tokio::sync::Semaphore;

pub use config::{ConfigError, ServiceConfig};
pub use jobs::{Job, JobKind, JobRegistry, JobState};

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Shared>,
    pub config: Arc<ServiceConfig>,
    pub jobs: Arc<JobRegistry>,
}

struct Shared {
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    pool: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let workers = config.workers.max(1);
        Self {
            inner: Arc::new(Shared {
                snapshot: RwLock::new(None),
                pool: Arc::new(Semaphore::new(workers)),
            }),
            config: Arc::new(config),
            jobs: Arc::new(JobRegistry::default()),
        }
    }

    pub fn with_snapshot(config: ServiceConfig, snapshot: Snapshot) -> Self {
        let state = Self::new(config);
        state.publish(snapshot);
        state
    }

    /// Replaces the served snapshot; jobs already submitted keep theirs.
    pub fn publish(&self, snapshot: Snapshot) {
        *self.inner.snapshot.write().expect("snapshot lock poisoned") = Some(Arc::new(snapshot));
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.inner.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    fn spawn_job(&self, id: String) {
        let state = self.clone();
        tokio::spawn(async move {
            let Ok(_permit) = state.inner.pool.clone().acquire_owned().await else {
                return;
            };
            let Some(job) = state.jobs.get(&id) else {
                return;
            };
            if state.jobs.start(&id).is_err() {
                return;
            }
            let outcome = tokio::task::spawn_blocking(move || job.snapshot.context().explain(&job.params)).await;
            let recorded = match outcome {
                Ok(Ok(report)) => state.jobs.finish(&id, report),
                Ok(Err(e)) => state.jobs.fail(&id, e.to_string()),
                Err(e) => state.jobs.fail(&id, format!("worker panicked: {e}")),
            };
            if let Err(e) = recorded {
                tracing::error!("{e}");
            }
        });
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/geometry", get(api::geometry))
        .route("/api/flows", get(api::flows))
        .route("/api/predict", get(api::predict))
        .route("/api/attribution", post(api::submit_attribution))
        .route("/api/attribution/{id}", get(api::get_attribution))
        .route("/api/attribution/{id}/trajectories", get(api::top_trajectories))
        .route("/api/glyphs", get(api::glyphs))
        .route("/api/region/{id}/grids", get(api::region_grid))
        .with_state(state)
}

/// Binds `host:port` and serves until the process is stopped.
pub async fn serve(state: AppState) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", state.config.host, state.config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
