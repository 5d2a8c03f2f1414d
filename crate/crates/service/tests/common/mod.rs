#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use flowlens_core::flow::FlowTensor;
use flowlens_core::ingest::{parse_trajectories, snap_all, write_trajectories, ColumnMapping, GridSpec};
use flowlens_core::pipeline::{train, FlowSeries, ModelKind};
use flowlens_core::predictor::LinearConfig;
use flowlens_core::regions::{kmeans, partition};
use flowlens_core::store::Snapshot;
use flowlens_core::synthkit::{generate, planted_routes_scenario};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn snapshot(dataset: &str) -> Snapshot {
    let scenario = planted_routes_scenario(3);
    let out = generate(&scenario).unwrap();
    let mut csv = Vec::new();
    write_trajectories(&mut csv, &out.records).unwrap();
    let parsed = parse_trajectories(&csv[..], &ColumnMapping::default()).unwrap();
    let snapped = snap_all(&parsed, &scenario.grid).unwrap().trajectories;
    let series = FlowSeries::build(&scenario.grid, &snapped).unwrap();
    let model = train(&series, ModelKind::Linear, LinearConfig::default()).unwrap();
    let background = series.background(model.history_len()).unwrap();
    let clustering = kmeans(&out.intersections, 6, 11).unwrap();
    let p = partition(&out.intersections, &clustering, &scenario.grid).unwrap();
    Snapshot {
        dataset: dataset.into(),
        grid: scenario.grid,
        series,
        model,
        background,
        partition: Some(p),
        trajectories: snapped.into_iter().map(|t| (t.trajectory_id.clone(), t)).collect(),
    }
}

/// Eight identical slices on a 3x3 grid served by the average baseline.
pub fn constant_snapshot() -> Snapshot {
    let grid = GridSpec::new([0.0, 0.0, 3.0, 3.0], 3, 3, 600.0, 0.0).unwrap();
    let tensors: Vec<FlowTensor> = (0..8)
        .map(|k| FlowTensor {
            slice: k,
            rows: 3,
            cols: 3,
            counts: (0..18).map(|i| i as u32 % 5).collect(),
        })
        .collect();
    let indices = (0..8)
        .map(|k| flowlens_core::flow::CellTrajectoryIndex {
            slice: k,
            ..Default::default()
        })
        .collect();
    let series = FlowSeries {
        grid,
        first: 0,
        tensors,
        indices,
    };
    let model = train(&series, ModelKind::Havg, LinearConfig::default()).unwrap();
    let background = series.background(model.history_len()).unwrap();
    Snapshot {
        dataset: "constant".into(),
        grid,
        series,
        model,
        background,
        partition: None,
        trajectories: Default::default(),
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()))
    };
    (status, value)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, "GET", uri, None).await
}

/// Polls a job until it leaves the queued/running states.
pub async fn wait(app: &Router, id: &str) -> Value {
    for _ in 0..6000 {
        let (status, body) = get(app, &format!("/api/attribution/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        if body["state"] == "done" || body["state"] == "failed" {
            return body;
        }
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
    }
    panic!("job {id} did not finish");
}
