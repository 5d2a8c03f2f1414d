use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use flowlens_core::flow::checksum;
use flowlens_core::store::{read_bytes, read_json, write_json, Layout};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::steps::{Outcome, Step};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the workspace unless it lies outside it.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub sequence: usize,
    pub command: String,
    /// Every parameter after merging flags, config file and defaults.
    pub resolved: Step,
    pub config_file: Option<PathBuf>,
    pub workspace: PathBuf,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub summary: Value,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub wall_seconds: f64,
    pub versions: BTreeMap<String, String>,
}

pub fn runs_dir(layout: &Layout) -> PathBuf {
    layout.path("runs")
}

fn relative(layout: &Layout, p: &Path) -> PathBuf {
    p.strip_prefix(&layout.root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn artifacts(layout: &Layout, paths: &[PathBuf]) -> anyhow::Result<Vec<Artifact>> {
    paths
        .iter()
        .map(|p| {
            Ok(Artifact {
                path: relative(layout, p),
                sha256: checksum(&read_bytes(p)?),
            })
        })
        .collect()
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("flowlens".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("manifest".to_string(), "1".to_string()),
    ])
}

/// Manifests in `dir`, in run order.
pub fn manifest_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn next_sequence(layout: &Layout) -> usize {
    manifest_files(&runs_dir(layout)).map(|f| f.len()).unwrap_or(0) + 1
}

/// Executes `step` and records it; the manifest is written only on success.
pub fn run_recorded(layout: &Layout, step: &Step, config_file: Option<&Path>) -> anyhow::Result<(RunManifest, Outcome)> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    let outcome = step.execute(layout)?;
    let manifest = RunManifest {
        sequence: next_sequence(layout),
        command: step.name().to_string(),
        resolved: step.clone(),
        config_file: config_file.map(Path::to_path_buf),
        workspace: layout.root.clone(),
        seeds: step.seeds().into_iter().collect(),
        inputs: artifacts(layout, &outcome.inputs)?,
        outputs: artifacts(layout, &outcome.outputs)?,
        summary: outcome.summary.clone(),
        started,
        wall_seconds: clock.elapsed().as_secs_f64(),
        versions: versions(),
    };
    let path = runs_dir(layout).join(format!("{:03}-{}.json", manifest.sequence, manifest.command));
    write_json(&path, &manifest)?;
    Ok((manifest, outcome))
}

/// Re-executes a recorded stage into `layout` and checks its outputs match byte for byte.
pub fn replay_one(layout: &Layout, manifest: &RunManifest) -> anyhow::Result<RunManifest> {
    let (fresh, _) = run_recorded(layout, &manifest.resolved, manifest.config_file.as_deref())?;
    let before: BTreeMap<_, _> = manifest.outputs.iter().map(|a| (&a.path, &a.sha256)).collect();
    let after: BTreeMap<_, _> = fresh.outputs.iter().map(|a| (&a.path, &a.sha256)).collect();
    if before != after {
        let diverged: Vec<String> = before
            .keys()
            .chain(after.keys())
            .filter(|p| before.get(*p) != after.get(*p))
            .map(|p| p.display().to_string())
            .collect();
        bail!("replay of {} diverged on {}", manifest.command, diverged.join(", "));
    }
    Ok(fresh)
}

pub fn load(path: &Path) -> anyhow::Result<RunManifest> {
    Ok(read_json(path)?)
}
