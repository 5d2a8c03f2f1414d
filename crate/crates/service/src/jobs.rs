use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use flowlens_core::attribution::Grouping;
use flowlens_core::pipeline::{AttributionReport, AttributionRequest};
use flowlens_core::store::Snapshot;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done) | (JobState::Running, JobState::Failed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    RegionShap,
    TrajectoryShap,
}

impl JobKind {
    pub fn of(request: &AttributionRequest) -> Self {
        match request.grouping {
            Grouping::PerCell => JobKind::TrajectoryShap,
            _ => JobKind::RegionShap,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub params: AttributionRequest,
    pub state: JobState,
    /// Seconds since the Unix epoch.
    pub created: f64,
    pub started: Option<f64>,
    pub finished: Option<f64>,
    pub result: Option<Arc<AttributionReport>>,
    pub error: Option<String>,
    /// Snapshot the job was submitted against.
    pub snapshot: Arc<Snapshot>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum JobError {
    #[error("unknown job {0}")]
    Unknown(String),
    #[error("job {id} cannot move from {from:?} to {to:?}")]
    Transition { id: String, from: JobState, to: JobState },
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Job table; every state change goes through one lock, and only forward.
#[derive(Debug, Default)]
pub struct JobRegistry {
    next: AtomicU64,
    jobs: Mutex<BTreeMap<String, Job>>,
}

impl JobRegistry {
    pub fn submit(&self, params: AttributionRequest, snapshot: Arc<Snapshot>) -> Job {
        let id = format!("job-{:06}", self.next.fetch_add(1, Ordering::SeqCst) + 1);
        let job = Job {
            id: id.clone(),
            kind: JobKind::of(&params),
            params,
            state: JobState::Queued,
            created: now(),
            started: None,
            finished: None,
            result: None,
            error: None,
            snapshot,
        };
        self.jobs.lock().expect("job registry poisoned").insert(id, job.clone());
        job
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs.lock().expect("job registry poisoned").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.jobs.lock().expect("job registry poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn transition(&self, id: &str, to: JobState, apply: impl FnOnce(&mut Job)) -> Result<(), JobError> {
        let mut jobs = self.jobs.lock().expect("job registry poisoned");
        let job = jobs.get_mut(id).ok_or_else(|| JobError::Unknown(id.into()))?;
        if !job.state.can_become(to) {
            return Err(JobError::Transition {
                id: id.into(),
                from: job.state,
                to,
            });
        }
        job.state = to;
        apply(job);
        Ok(())
    }

    pub fn start(&self, id: &str) -> Result<(), JobError> {
        self.transition(id, JobState::Running, |j| j.started = Some(now()))
    }

    pub fn finish(&self, id: &str, report: AttributionReport) -> Result<(), JobError> {
        self.transition(id, JobState::Done, |j| {
            j.finished = Some(now());
            j.result = Some(Arc::new(report));
        })
    }

    pub fn fail(&self, id: &str, message: String) -> Result<(), JobError> {
        self.transition(id, JobState::Failed, |j| {
            j.finished = Some(now());
            j.error = Some(message);
        })
    }
}
