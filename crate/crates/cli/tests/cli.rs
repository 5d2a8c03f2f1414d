use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowlens_core::flow::{transitions, Channel, FlowKey};
use flowlens_core::ingest::GridSpec;
use flowlens_core::store::{load_series, load_snapped, read_json, Layout};
use serde_json::Value;

fn flowlens(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlens"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env_remove("FLOWLENS_PORT")
        .output()
        .expect("binary runs")
}

fn ok(ws: &Path, args: &[&str]) -> String {
    let out = flowlens(ws, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_ingest_flow_satisfies_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    ok(ws, &["synth", "--preset", "planted-routes", "--seed", "5"]);
    ok(ws, &["ingest"]);
    ok(ws, &["flow"]);

    let layout = Layout::new(ws);
    let grid: GridSpec = read_json(&layout.grid()).unwrap();
    assert_eq!((grid.rows, grid.cols), (12, 12));
    let trajs = load_snapped(&layout.snapped()).unwrap();
    let series = load_series(&layout, &grid).unwrap();
    for (t, idx) in series.tensors.iter().zip(&series.indices) {
        let mut sum = vec![0u32; t.counts.len()];
        for traj in &trajs {
            for (key, n) in transitions(traj, t.slice).entries {
                sum[t.offset(key.channel, key.cell)] += n;
            }
        }
        assert_eq!(sum, t.counts, "slice {}", t.slice);
        for (FlowKey { channel, cell }, list) in &idx.entries {
            assert_eq!(list.iter().map(|(_, n)| n).sum::<u32>(), t.get(*channel, *cell));
        }
    }
    assert!(series.tensors.iter().map(|t| t.total(Channel::In)).sum::<u64>() > 0);
}

#[test]
fn kselect_prints_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    ok(ws, &["synth", "--preset", "planted-routes"]);
    let text = ok(ws, &["kselect", "--kmin", "1", "--kmax", "26"]);
    let rows: Vec<&str> = text.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 26);
    assert!(rows[0].starts_with("1\t0.000000"));
    let table: Vec<Value> = read_json(&Layout::new(ws).kselect()).unwrap();
    assert_eq!(table.len(), 26);
    assert_eq!(table[25]["k"], 26);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowlens(dir.path(), &["flow", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
    let out = flowlens(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failures_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowlens(dir.path(), &["flow"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["command"], "flow");
    assert!(v["error"].as_str().unwrap().contains("grid.json"));
    assert!(!dir.path().join("runs").exists());

    fs::write(dir.path().join("bad.csv"), "drv1,notanumber,104.07,30.67\n").unwrap();
    let out = flowlens(dir.path(), &["ingest", "--input", "bad.csv", "--bbox", "104,30,105,31"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    let msg = v["error"].as_str().unwrap();
    assert!(msg.contains("line 1") && msg.contains("timestamp"), "{msg}");
}

#[test]
fn ingest_honours_schema_flags_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    fs::write(
        ws.join("raw.tsv"),
        "lat\tlon\tts\tid\n30.10\t104.10\t0\ta\n30.90\t104.90\t30\ta\n30.50\t104.50\t10\tb\n30.55\t104.95\t20\tb\n",
    )
    .unwrap();
    fs::write(ws.join("flowlens.toml"), "[grid]\nrows = 4\ncols = 4\nslice_seconds = 60.0\n").unwrap();
    let config = ws.join("flowlens.toml");
    ok(
        ws,
        &[
            "--config",
            config.to_str().unwrap(),
            "ingest",
            "--input",
            "raw.tsv",
            "--delimiter",
            "\t",
            "--header",
            "--columns",
            "3,2,1,0",
            "--grid",
            "2x2",
        ],
    );
    let grid: GridSpec = read_json(&Layout::new(ws).grid()).unwrap();
    assert_eq!((grid.rows, grid.cols, grid.slice_seconds), (2, 2, 60.0));
    assert_eq!(grid.bbox(), [104.10, 30.10, 104.95, 30.90]);
    let trajs = load_snapped(&Layout::new(ws).snapped()).unwrap();
    assert_eq!(trajs.len(), 2);
    assert_eq!(trajs[0].samples.len(), 2);

    let manifest: Value = read_json(&ws.join("runs/001-ingest.json")).unwrap();
    assert_eq!(manifest["command"], "ingest");
    assert_eq!(manifest["resolved"]["grid"]["rows"], 2);
    assert_eq!(manifest["resolved"]["columns"]["delimiter"], 9);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    assert!(manifest["wall_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(manifest["versions"]["flowlens"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn attribute_writes_report_with_top_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    ok(ws, &["synth", "--preset", "planted-routes"]);
    ok(ws, &["ingest"]);
    ok(ws, &["flow"]);
    ok(ws, &["train", "--model", "havg"]);
    ok(ws, &["partition", "--k", "8"]);
    let text = ok(
        ws,
        &[
            "attribute", "--target", "cell:6,6", "--channel", "in", "--horizon", "2", "--grouping", "cell", "--scope", "radius:1",
            "--nsamples", "1024", "--seed", "7", "--out", "a.json",
        ],
    );
    assert!(text.contains("efficiency residual"));
    let report: Value = read_json(&ws.join("a.json")).unwrap();
    assert_eq!(report["request"]["horizon"], 2);
    assert_eq!(report["top"].as_array().unwrap().len(), 5);

    ok(ws, &["attribute", "--target", "region:3", "--grouping", "region_merged", "--out", "r.json"]);
    let report: Value = read_json(&ws.join("r.json")).unwrap();
    assert_eq!(report["attribution"]["space"]["groups"].as_array().unwrap().len(), 8);
    assert!(report["trajectories"].is_null());
}

#[test]
fn replay_reproduces_artifacts() {
    let src = tempfile::tempdir().unwrap();
    let ws = src.path();
    ok(ws, &["synth", "--preset", "planted-routes", "--seed", "9"]);
    ok(ws, &["ingest"]);
    ok(ws, &["flow"]);
    ok(ws, &["train"]);
    ok(ws, &["partition", "--k", "6"]);
    ok(ws, &["attribute", "--target", "cell:6,6", "--scope", "radius:1", "--nsamples", "512"]);

    let dst = tempfile::tempdir().unwrap();
    let runs = ws.join("runs");
    let text = ok(dst.path(), &["replay", "--manifest", runs.to_str().unwrap()]);
    assert_eq!(text.lines().count(), 6, "{text}");
    for m in fs::read_dir(&runs).unwrap() {
        let m: Value = read_json(&m.unwrap().path()).unwrap();
        for a in m["outputs"].as_array().unwrap() {
            let rel = a["path"].as_str().unwrap();
            assert_eq!(fs::read(ws.join(rel)).unwrap(), fs::read(dst.path().join(rel)).unwrap(), "{rel}");
        }
    }

    fs::write(ws.join("model.bin"), b"tampered").unwrap();
    let out = flowlens(ws, &["replay", "--manifest", runs.join("005-partition.json").to_str().unwrap()]);
    assert!(out.status.success());
    let manifest: Value = read_json(&runs.join("004-train.json")).unwrap();
    let mut edited = manifest.clone();
    edited["outputs"][0]["sha256"] = Value::String("0".repeat(64));
    let forged = ws.join("forged.json");
    fs::write(&forged, serde_json::to_vec(&edited).unwrap()).unwrap();
    let out = flowlens(dst.path(), &["replay", "--manifest", forged.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn serve_reads_port_from_environment() {
    use std::io::{BufRead, BufReader, Read, Write};

    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    ok(ws, &["synth", "--preset", "planted-routes"]);
    ok(ws, &["ingest"]);
    ok(ws, &["flow"]);
    ok(ws, &["train", "--model", "havg"]);

    let out = Command::new(env!("CARGO_BIN_EXE_flowlens"))
        .arg("--workspace")
        .arg(ws)
        .arg("serve")
        .env("FLOWLENS_PORT", "eighty")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["command"], "serve");

    let mut child = Command::new(env!("CARGO_BIN_EXE_flowlens"))
        .arg("--workspace")
        .arg(ws)
        .args(["serve", "--dataset", "demo"])
        .env("FLOWLENS_PORT", "0")
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut addr = None;
    let mut line = String::new();
    while addr.is_none() && stderr.read_line(&mut line).unwrap() > 0 {
        addr = line.split("listening on ").nth(1).map(|a| a.trim().to_string());
        line.clear();
    }
    let addr = addr.expect("server announces its address");
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /api/geometry?dataset=demo HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let body: Value = serde_json::from_str(response.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(body["dataset"], "demo");
    assert_eq!(body["grid"]["rows"], 12);
    assert!(body["partition"].is_null());
}
