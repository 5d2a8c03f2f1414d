mod common;

use std::collections::BTreeMap;

use axum::http::StatusCode;
use common::{call, constant_snapshot, get, snapshot, wait};
use flowlens_core::attribution::{ExplainConfig, Grouping, SplitMode, TargetKind};
use flowlens_core::flow::Channel;
use flowlens_core::pipeline::{AttributionReport, AttributionRequest, Scope};
use flowlens_core::regions::RadarGlyphPayload;
use flowlens_service::{router, AppState, JobState, ServiceConfig};
use serde_json::{json, Value};

fn cell_request(k: i64) -> AttributionRequest {
    AttributionRequest {
        k,
        target: TargetKind::Cell { row: 6, col: 6 },
        channel: Channel::In,
        horizon: 2,
        grouping: Grouping::PerCell,
        scope: Scope::Radius { radius: 1 },
        explain: ExplainConfig {
            nsamples: 1024,
            ..ExplainConfig::default()
        },
        split: SplitMode::Equal,
        top_k: 5,
        rank_channel: None,
    }
}

fn app() -> (AppState, axum::Router) {
    let state = AppState::with_snapshot(ServiceConfig::default(), snapshot("synthetic"));
    let r = router(state.clone());
    (state, r)
}

#[tokio::test]
async fn geometry_lifecycle() {
    let state = AppState::new(ServiceConfig::default());
    let app = router(state.clone());
    let (status, body) = get(&app, "/api/geometry").await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body["error"].as_str().unwrap().contains("snapshot"));

    state.publish(snapshot("synthetic"));
    let (status, first) = get(&app, "/api/geometry").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["regions"], 6);
    assert_eq!(first["partition"]["type"], "FeatureCollection");
    assert_eq!(first["partition"]["features"].as_array().unwrap().len(), 6);
    assert_eq!(first["grid"]["rows"], 12);
    let (_, second) = get(&app, "/api/geometry?dataset=synthetic").await;
    assert_eq!(first, second);
    let (status, _) = get(&app, "/api/geometry?dataset=elsewhere").await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    state.publish(constant_snapshot());
    let (_, swapped) = get(&app, "/api/geometry").await;
    assert_eq!(swapped["dataset"], "constant");
    assert_eq!(swapped["regions"], 0);
    assert!(swapped["partition"].is_null());
}

#[tokio::test]
async fn flows_match_tensors() {
    let (state, app) = app();
    let snap = state.snapshot().unwrap();
    let k = snap.series.first + 30;
    let (status, body) = get(&app, &format!("/api/flows?k={k}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["dims"], json!([2, 12, 12]));
    assert_eq!(body["values"], serde_json::to_value(snap.series.tensor(k).unwrap().nested()).unwrap());

    let (status, body) = get(&app, &format!("/api/flows?k={}", snap.series.last() + 1)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("outside"));
    let (status, _) = get(&app, "/api/flows?k=abc").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn predictions_match_rollout() {
    let (state, app) = app();
    let snap = state.snapshot().unwrap();
    let k = snap.series.last();
    let (status, body) = get(&app, &format!("/api/predict?k={k}")).await;
    assert_eq!(status, StatusCode::OK);
    let direct = snap.context().predict(k, 6).unwrap();
    let frames = body["predictions"].as_array().unwrap();
    assert_eq!(frames.len(), 6);
    for (served, p) in frames.iter().zip(&direct) {
        assert_eq!(served["horizon"], p.horizon);
        let values: Vec<Vec<Vec<f64>>> = serde_json::from_value(served["values"].clone()).unwrap();
        assert_eq!(values, p.values.nested());
    }

    let (_, one) = get(&app, &format!("/api/predict?k={k}&steps=1")).await;
    assert_eq!(one["predictions"].as_array().unwrap().len(), 1);
    assert_eq!(one["predictions"][0], frames[0]);

    let (status, _) = get(&app, &format!("/api/predict?k={}", snap.series.first + 2)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = get(&app, &format!("/api/predict?k={k}&steps=0")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn average_baseline_on_constant_history_predicts_current() {
    let app = router(AppState::with_snapshot(ServiceConfig::default(), constant_snapshot()));
    let (_, current) = get(&app, "/api/flows?k=7").await;
    let (status, body) = get(&app, "/api/predict?k=7&steps=6").await;
    assert_eq!(status, StatusCode::OK);
    let expected: Vec<Vec<Vec<f64>>> = serde_json::from_value(current["values"].clone()).unwrap();
    for frame in body["predictions"].as_array().unwrap() {
        let v: Vec<Vec<Vec<f64>>> = serde_json::from_value(frame["values"].clone()).unwrap();
        assert_eq!(v, expected);
    }
}

#[tokio::test]
async fn attribution_job_equals_direct_call() {
    let (state, app) = app();
    let snap = state.snapshot().unwrap();
    let request = cell_request(snap.series.last() - 1);
    let (status, submitted) = call(&app, "POST", "/api/attribution", Some(serde_json::to_value(&request).unwrap())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(submitted["kind"], "trajectory_shap");
    let id = submitted["id"].as_str().unwrap().to_string();

    let done = wait(&app, &id).await;
    assert_eq!(done["state"], "done", "{done}");
    assert!(done["efficiency_residual"].as_f64().unwrap().abs() <= 1e-9);
    assert!(done["finished"].as_f64().unwrap() >= done["created"].as_f64().unwrap());

    let served: AttributionReport = serde_json::from_value(done["result"].clone()).unwrap();
    let direct = snap.context().explain(&request).unwrap();
    let direct: AttributionReport = serde_json::from_str(&serde_json::to_string(&direct).unwrap()).unwrap();
    assert_eq!(served, direct);

    let (_, again) = get(&app, &format!("/api/attribution/{id}")).await;
    assert_eq!(again, done);

    let (_, dup) = call(&app, "POST", "/api/attribution", Some(serde_json::to_value(&request).unwrap())).await;
    let dup_id = dup["id"].as_str().unwrap();
    assert_ne!(dup_id, id);
    let dup_done = wait(&app, dup_id).await;
    assert_eq!(dup_done["result"], done["result"]);
}

#[tokio::test]
async fn top_trajectories_carry_bars_and_geometry() {
    let (state, app) = app();
    let snap = state.snapshot().unwrap();
    let request = cell_request(snap.series.last() - 1);
    let (_, submitted) = call(&app, "POST", "/api/attribution", Some(serde_json::to_value(&request).unwrap())).await;
    let id = submitted["id"].as_str().unwrap();
    let done = wait(&app, id).await;
    let report: AttributionReport = serde_json::from_value(done["result"].clone()).unwrap();

    let (status, top) = get(&app, &format!("/api/attribution/{id}/trajectories")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(top["k"], 5);
    assert_eq!(top["window"].as_array().unwrap().len(), 5);
    let rows = top["trajectories"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let expected = report.top_k(5);
    for (i, (row, score)) in rows.iter().zip(&expected).enumerate() {
        assert_eq!(row["rank"], i + 1);
        assert_eq!(row["trajectory_id"], score.trajectory_id.as_str());
        assert_eq!(row["total"].as_f64().unwrap(), score.total);
        let bars: Vec<f64> = serde_json::from_value(row["per_tau"].clone()).unwrap();
        assert!((bars.iter().sum::<f64>() - score.total).abs() < 1e-12);
        let cells = row["cells"].as_array().unwrap();
        assert!(!cells.is_empty());
        for c in cells {
            assert!(c["lon"].as_f64().unwrap() > 0.0 && c["lat"].as_f64().unwrap() > 0.0);
        }
        assert!(row["path"].as_array().unwrap().len() >= 2);
    }
    let (_, two) = get(&app, &format!("/api/attribution/{id}/trajectories?k=2")).await;
    assert_eq!(two["trajectories"].as_array().unwrap()[..], rows[..2]);
}

#[tokio::test]
async fn job_errors() {
    let (state, app) = app();
    let (status, _) = get(&app, "/api/attribution/job-999999").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = get(&app, "/api/attribution/job-999999/trajectories").await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let snap = state.snapshot().unwrap();
    let mut bad = cell_request(snap.series.last());
    bad.target = TargetKind::Cell { row: 40, col: 0 };
    let (status, body) = call(&app, "POST", "/api/attribution", Some(serde_json::to_value(&bad).unwrap())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    bad = cell_request(snap.series.last() + 5);
    let (status, _) = call(&app, "POST", "/api/attribution", Some(serde_json::to_value(&bad).unwrap())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/api/attribution", Some(json!({"k": 3}))).await;
    assert!(status.is_client_error());

    let mut failing = cell_request(snap.series.last());
    failing.explain.nsamples = 10;
    let (status, submitted) = call(&app, "POST", "/api/attribution", Some(serde_json::to_value(&failing).unwrap())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = submitted["id"].as_str().unwrap();
    let failed = wait(&app, id).await;
    assert_eq!(failed["state"], "failed");
    assert!(failed["error"].as_str().unwrap().contains("nsamples"), "{failed}");
    assert!(failed["result"].is_null());
    let (status, body) = get(&app, &format!("/api/attribution/{id}/trajectories")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body["error"].as_str().unwrap().contains("failed"));

    let mut region = cell_request(snap.series.last());
    region.grouping = Grouping::PerRegion;
    let (_, submitted) = call(&app, "POST", "/api/attribution", Some(serde_json::to_value(&region).unwrap())).await;
    assert_eq!(submitted["kind"], "region_shap");
    let id = submitted["id"].as_str().unwrap();
    assert_eq!(wait(&app, id).await["state"], "done");
    let (status, _) = get(&app, &format!("/api/attribution/{id}/trajectories")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn job_pool_is_bounded() {
    let config = ServiceConfig {
        workers: 2,
        ..ServiceConfig::default()
    };
    let state = AppState::with_snapshot(config, snapshot("synthetic"));
    let app = router(state.clone());
    let snap = state.snapshot().unwrap();
    let mut ids = Vec::new();
    for seed in 0..6 {
        let mut r = cell_request(snap.series.last() - 1);
        r.explain.seed = seed;
        r.explain.nsamples = 4096;
        let (_, s) = call(&app, "POST", "/api/attribution", Some(serde_json::to_value(&r).unwrap())).await;
        ids.push(s["id"].as_str().unwrap().to_string());
    }
    let mut seen = BTreeMap::new();
    loop {
        let states: Vec<JobState> = ids.iter().map(|id| state.jobs.get(id).unwrap().state).collect();
        let running = states.iter().filter(|s| **s == JobState::Running).count();
        assert!(running <= 2, "{states:?}");
        for (id, s) in ids.iter().zip(&states) {
            let prev = seen.insert(id.clone(), *s);
            if let Some(p) = prev {
                assert!(p <= *s, "{id} went {p:?} -> {s:?}");
            }
        }
        if states.iter().all(|s| s.is_terminal()) {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(2)).await;
    }
    assert!(ids.iter().all(|id| state.jobs.get(id).unwrap().state == JobState::Done));
}

#[tokio::test]
async fn glyphs_equal_direct_calls() {
    let (state, app) = app();
    let snap = state.snapshot().unwrap();
    let k = snap.series.last() - 1;
    let (status, body) = get(&app, &format!("/api/glyphs?k={k}&horizon=2")).await;
    assert_eq!(status, StatusCode::OK);
    let served: Vec<RadarGlyphPayload> = serde_json::from_value(body.clone()).unwrap();
    let direct = snap.context().glyphs(k, 2, Channel::In, 6, &ExplainConfig::default()).unwrap();
    let direct: Vec<RadarGlyphPayload> = serde_json::from_str(&serde_json::to_string(&direct).unwrap()).unwrap();
    assert_eq!(served, direct);
    assert_eq!(served.len(), 6);

    let partition = snap.partition.as_ref().unwrap();
    for g in &served {
        assert_eq!(g.series.len(), 7);
        assert_eq!(g.selected_horizon, 2);
        assert_eq!(g.sectors.len(), 8);
        let neighbor_total: f64 = {
            let req = AttributionRequest {
                k,
                target: TargetKind::Region { region: g.region_id },
                channel: Channel::In,
                horizon: 2,
                grouping: Grouping::PerRegionMerged,
                scope: Scope::All,
                explain: ExplainConfig::default(),
                split: SplitMode::Equal,
                top_k: 0,
                rank_channel: None,
            };
            let report = snap.context().explain(&req).unwrap();
            partition
                .neighbors(g.region_id)
                .iter()
                .map(|n| report.attribution.phi_of(&format!("r{n}")).unwrap())
                .sum()
        };
        assert!((g.net() - neighbor_total).abs() < 1e-9);
        assert!(g.neighbor_sectors.keys().all(|n| partition.neighbors(g.region_id).contains(n)));
    }

    let (_, out) = get(&app, &format!("/api/glyphs?k={k}&horizon=1&channel=out")).await;
    assert_eq!(out[0]["channel"], "out");
    let (status, _) = get(&app, &format!("/api/glyphs?k={k}&horizon=9")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = get(&app, &format!("/api/glyphs?k={}&horizon=1", snap.series.last() + 1)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn region_grids_are_row_major_series() {
    let (state, app) = app();
    let snap = state.snapshot().unwrap();
    let k = snap.series.last();
    let (status, body) = get(&app, &format!("/api/region/2/grids?k={k}")).await;
    assert_eq!(status, StatusCode::OK);
    let cells: Vec<(usize, usize)> = body["cells"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["row"].as_u64().unwrap() as usize, c["col"].as_u64().unwrap() as usize))
        .collect();
    let mut sorted = cells.clone();
    sorted.sort();
    assert_eq!(cells, sorted);
    let series: Vec<Vec<f64>> = serde_json::from_value(body["series"].clone()).unwrap();
    assert_eq!(series.len(), cells.len());
    assert!(series.iter().all(|s| s.len() == 7));
    let current = snap.series.tensor(k).unwrap();
    for (&(r, c), s) in cells.iter().zip(&series) {
        assert_eq!(s[0], current.get(Channel::In, flowlens_core::ingest::Cell::new(r, c)) as f64);
    }
    let (status, _) = get(&app, &format!("/api/region/99/grids?k={k}")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = get(&app, &format!("/api/region/0/grids?k={}", snap.series.first)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn region_without_neighbours_gets_empty_sectors() {
    let mut snap = snapshot("synthetic");
    let p = snap.partition.as_mut().unwrap();
    let isolated = 0;
    for list in p.adjacency.iter_mut() {
        list.retain(|&n| n != isolated);
    }
    p.adjacency[isolated].clear();
    let app = router(AppState::with_snapshot(ServiceConfig::default(), snap));
    let (status, body) = get(&app, "/api/glyphs?k=100&horizon=1").await;
    assert_eq!(status, StatusCode::OK);
    let glyph = body.as_array().unwrap().iter().find(|g| g["region_id"] == isolated).unwrap();
    for s in glyph["sectors"].as_array().unwrap() {
        assert_eq!(s, &json!({"positive_sum": 0.0, "negative_sum": 0.0}));
    }
    assert_eq!(glyph["neighbor_sectors"], Value::Object(Default::default()));
}
