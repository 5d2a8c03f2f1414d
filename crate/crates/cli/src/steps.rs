//! Fully resolved pipeline stages. A stage carries every parameter it needs,
//! so the same value drives a fresh run and a replay.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use flowlens_core::flow::Channel;
use flowlens_core::ingest::{parse_trajectories, snap_all, write_trajectories, ColumnMapping, GridSpec};
use flowlens_core::pipeline::{train, AttributionRequest, FlowSeries, ModelKind};
use flowlens_core::predictor::LinearConfig;
use flowlens_core::regions::{k_sweep, kmeans, partition, read_intersections, write_intersections, KDiagnostics};
use flowlens_core::store::{self, write_atomic, write_json, Layout, Snapshot};
use flowlens_core::synthkit::{generate, Scenario};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Step {
    Synth { scenario: Scenario },
    Ingest { input: PathBuf, grid: GridSpec, columns: ColumnMapping },
    Flow,
    Train { model: ModelKind, linear: LinearConfig },
    Kselect { kmin: usize, kmax: usize, seed: u64 },
    Partition { k: usize, seed: u64 },
    Attribute { request: AttributionRequest, out: PathBuf },
}

/// Files a stage read and wrote, relative to the workspace when possible.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Printed to stdout on success.
    pub report: String,
    pub summary: Value,
}

impl Step {
    pub fn name(&self) -> &'static str {
        match self {
            Step::Synth { .. } => "synth",
            Step::Ingest { .. } => "ingest",
            Step::Flow => "flow",
            Step::Train { .. } => "train",
            Step::Kselect { .. } => "kselect",
            Step::Partition { .. } => "partition",
            Step::Attribute { .. } => "attribute",
        }
    }

    /// Seeds the stage depends on, by role.
    pub fn seeds(&self) -> Vec<(String, u64)> {
        match self {
            Step::Synth { scenario } => {
                let mut s = vec![("scenario".into(), scenario.seed), ("intersections".into(), scenario.intersections.seed)];
                if let Some(bg) = &scenario.background {
                    s.push(("background".into(), bg.seed));
                }
                s
            }
            Step::Kselect { seed, .. } | Step::Partition { seed, .. } => vec![("kmeans".into(), *seed)],
            Step::Attribute { request, .. } => vec![("explain".into(), request.explain.seed)],
            _ => Vec::new(),
        }
    }

    pub fn execute(&self, layout: &Layout) -> anyhow::Result<Outcome> {
        match self {
            Step::Synth { scenario } => synth(layout, scenario),
            Step::Ingest { input, grid, columns } => ingest(layout, input, grid, columns),
            Step::Flow => flow(layout),
            Step::Train { model, linear } => train_model(layout, *model, *linear),
            Step::Kselect { kmin, kmax, seed } => kselect(layout, *kmin, *kmax, *seed),
            Step::Partition { k, seed } => build_partition(layout, *k, *seed),
            Step::Attribute { request, out } => attribute(layout, request, out),
        }
    }
}

pub fn resolve_path(layout: &Layout, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        layout.root.join(p)
    }
}

fn synth(layout: &Layout, scenario: &Scenario) -> anyhow::Result<Outcome> {
    let out = generate(scenario)?;
    let mut csv = Vec::new();
    write_trajectories(&mut csv, &out.records)?;
    write_atomic(&layout.records(), &csv)?;
    let mut ix = Vec::new();
    write_intersections(&mut ix, &out.intersections)?;
    write_atomic(&layout.intersections(), &ix)?;
    write_json(&layout.planted(), &out.manifest)?;
    let scenario_path = layout.path("scenario.json");
    write_json(&scenario_path, scenario)?;
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![layout.records(), layout.intersections(), layout.planted(), scenario_path],
        report: format!(
            "{} trajectories, {} records, {} intersections, {} planted surges",
            out.manifest.trajectory_count,
            out.manifest.record_count,
            out.intersections.len(),
            out.manifest.surges.len()
        ),
        summary: json!({
            "trajectories": out.manifest.trajectory_count,
            "records": out.manifest.record_count,
            "intersections": out.intersections.len(),
        }),
    })
}

fn ingest(layout: &Layout, input: &Path, grid: &GridSpec, columns: &ColumnMapping) -> anyhow::Result<Outcome> {
    let path = resolve_path(layout, input);
    let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let parsed = parse_trajectories(std::io::BufReader::new(file), columns).with_context(|| format!("parsing {}", path.display()))?;
    let summary = snap_all(&parsed, grid)?;
    let kept: usize = summary.trajectories.iter().map(|t| t.samples.len()).sum();
    ensure!(
        kept + summary.dropped_points == parsed.record_count(),
        "snapping lost points: {kept} kept + {} dropped != {} parsed",
        summary.dropped_points,
        parsed.record_count()
    );
    write_json(&layout.grid(), grid)?;
    store::save_snapped(&layout.snapped(), &summary.trajectories)?;
    Ok(Outcome {
        inputs: vec![path],
        outputs: vec![layout.grid(), layout.snapped()],
        report: format!(
            "{} trajectories snapped onto {}x{}, {} points outside the grid, {} trajectories fully outside, {} duplicate rows",
            summary.trajectories.len(),
            grid.rows,
            grid.cols,
            summary.dropped_points,
            summary.outside.len(),
            parsed.duplicate_count
        ),
        summary: json!({
            "trajectories": summary.trajectories.len(),
            "dropped_points": summary.dropped_points,
            "outside": summary.outside.len(),
            "duplicates": parsed.duplicate_count,
        }),
    })
}

fn flow(layout: &Layout) -> anyhow::Result<Outcome> {
    let grid: GridSpec = store::read_json(&layout.grid())?;
    let trajs = store::load_snapped(&layout.snapped())?;
    let series = FlowSeries::build(&grid, &trajs)?;
    for (t, idx) in series.tensors.iter().zip(&series.indices) {
        for c in grid.cells() {
            for ch in [Channel::In, Channel::Out] {
                let listed: u32 = idx.get(ch, c).iter().map(|(_, n)| n).sum();
                ensure!(listed == t.get(ch, c), "slice {}: index disagrees with tensor at {ch} {c:?}", t.slice);
            }
        }
    }
    store::save_series(layout, &series)?;
    let mut outputs = vec![layout.series(), layout.index()];
    for t in &series.tensors {
        outputs.push(layout.flow_payload(t.slice));
        outputs.push(layout.flow_sidecar(t.slice));
    }
    let total_in: u64 = series.tensors.iter().map(|t| t.total(Channel::In)).sum();
    Ok(Outcome {
        inputs: vec![layout.grid(), layout.snapped()],
        outputs,
        report: format!("slices {}..={}, {total_in} transitions", series.first, series.last()),
        summary: json!({"first": series.first, "last": series.last(), "transitions": total_in}),
    })
}

fn train_model(layout: &Layout, model: ModelKind, linear: LinearConfig) -> anyhow::Result<Outcome> {
    let grid: GridSpec = store::read_json(&layout.grid())?;
    let series = store::load_series(layout, &grid)?;
    let fitted = train(&series, model, linear)?;
    let background = series.background(fitted.history_len())?;
    let pairs = series.training_pairs(fitted.history_len());
    let mse = flowlens_core::predictor::training_mse(fitted.predictor(), &pairs)?;
    store::save_model(layout, &fitted)?;
    write_json(&layout.background(), &background)?;
    Ok(Outcome {
        inputs: vec![layout.grid(), layout.series()],
        outputs: vec![layout.model_meta(), layout.model_params(), layout.background()],
        report: format!("{} pairs, training mse {mse:.6}", pairs.len()),
        summary: json!({"pairs": pairs.len(), "training_mse": mse}),
    })
}

fn load_intersections(layout: &Layout) -> anyhow::Result<Vec<flowlens_core::regions::Intersection>> {
    let path = layout.intersections();
    let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    read_intersections(file).with_context(|| format!("reading {}", path.display()))
}

pub fn kselect_table(rows: &[KDiagnostics]) -> String {
    let mut out = String::from("k\tvariance\tmean_count\tinertia\n");
    for d in rows {
        out.push_str(&format!("{}\t{:.6}\t{:.3}\t{:.9}\n", d.k, d.variance, d.mean_count, d.inertia));
    }
    out
}

fn kselect(layout: &Layout, kmin: usize, kmax: usize, seed: u64) -> anyhow::Result<Outcome> {
    let points = load_intersections(layout)?;
    let rows = k_sweep(&points, kmin, kmax, seed)?;
    write_json(&layout.kselect(), &rows)?;
    Ok(Outcome {
        inputs: vec![layout.intersections()],
        outputs: vec![layout.kselect()],
        report: kselect_table(&rows).trim_end().to_string(),
        summary: json!({"rows": rows.len()}),
    })
}

fn build_partition(layout: &Layout, k: usize, seed: u64) -> anyhow::Result<Outcome> {
    let grid: GridSpec = store::read_json(&layout.grid())?;
    let points = load_intersections(layout)?;
    let clustering = kmeans(&points, k, seed)?;
    let p = partition(&points, &clustering, &grid)?;
    let area: f64 = p.regions.iter().map(|r| r.area).sum();
    let bbox = p.bbox.area();
    ensure!(((area - bbox) / bbox).abs() <= 1e-6, "regions cover {area} of a {bbox} bounding box");
    store::save_partition(layout, &p)?;
    Ok(Outcome {
        inputs: vec![layout.grid(), layout.intersections()],
        outputs: vec![layout.partition(), layout.geojson()],
        report: format!(
            "{} regions after {} k-means iterations, converged: {}",
            p.regions.len(),
            clustering.iterations,
            clustering.converged
        ),
        summary: json!({"regions": p.regions.len(), "iterations": clustering.iterations}),
    })
}

fn attribute(layout: &Layout, request: &AttributionRequest, out: &Path) -> anyhow::Result<Outcome> {
    let snap = Snapshot::load(&layout.root, None)?;
    let report = snap.context().explain(request)?;
    let residual = report.attribution.result.efficiency_residual();
    let path = resolve_path(layout, out);
    write_json(&path, &report)?;

    let mut text = format!(
        "f(x) = {:.6}, f(background) = {:.6}, efficiency residual {residual:.3e}, {} players",
        report.attribution.result.full_value,
        report.attribution.result.base_value,
        report.attribution.space.len()
    );
    if let Some(t) = &report.trajectories {
        text.push_str(&format!(", {} trajectories, residual bucket {:.6}", t.scores.len(), t.residual));
        for r in &report.top {
            text.push_str(&format!(
                "\n{}\t{}\t{:+.6}\tin {:+.6}\tout {:+.6}",
                r.rank, r.score.trajectory_id, r.score.total, r.score.total_in, r.score.total_out
            ));
        }
    } else {
        let mut phi = report.attribution.attributions();
        phi.sort_by(|a, b| b.phi.abs().total_cmp(&a.phi.abs()).then_with(|| a.key.cmp(&b.key)));
        for f in phi.iter().take(request.top_k.max(1)) {
            text.push_str(&format!("\n{}\t{:+.6}", f.key, f.phi));
        }
    }
    let mut inputs = vec![layout.grid(), layout.series(), layout.model_meta(), layout.background()];
    if snap.partition.is_some() {
        inputs.push(layout.partition());
    }
    if !residual.is_finite() || residual.abs() > 1e-6 {
        bail!("efficiency residual {residual} exceeds tolerance");
    }
    Ok(Outcome {
        inputs,
        outputs: vec![path],
        report: text,
        summary: json!({"efficiency_residual": residual, "players": report.attribution.space.len()}),
    })
}
