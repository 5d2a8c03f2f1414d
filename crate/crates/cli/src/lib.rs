//! Command-line stages of the flowlens pipeline.
//!
//! Each stage reads and writes artifacts under one workspace directory and
//! records a [`manifest::RunManifest`] in `runs/` that `replay` can re-execute.

pub mod config;
pub mod manifest;
pub mod steps;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use flowlens_core::attribution::{Grouping, SplitMode, TargetKind};
use flowlens_core::flow::Channel;
use flowlens_core::ingest::{parse_trajectories, Cell, ColumnMapping, GridSpec};
use flowlens_core::pipeline::{AttributionRequest, ModelKind, Scope};
use flowlens_core::predictor::LinearConfig;
use flowlens_core::store::{read_json, Layout, Snapshot};
use flowlens_core::synthkit::{planted_routes_scenario, Scenario};

use crate::config::ToolConfig;
use crate::steps::Step;

#[derive(Debug, Parser)]
#[command(name = "flowlens", version, about = "Trajectory flow prediction and attribution pipeline")]
pub struct Cli {
    /// Directory holding every artifact; relative paths resolve against it.
    #[arg(long, global = true, default_value = ".")]
    pub workspace: PathBuf,
    /// TOML file with defaults for the flags below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario: records.csv, intersections.csv, planted.json.
    Synth(SynthArgs),
    /// Parse and snap raw records onto the grid.
    Ingest(IngestArgs),
    /// Build per-slice flow tensors and trajectory indices.
    Flow,
    /// Fit a predictor and its attribution background.
    Train(TrainArgs),
    /// Sweep K and print the cluster-size variance table.
    Kselect(KselectArgs),
    /// Cluster intersections and merge their Voronoi cells into regions.
    Partition(PartitionArgs),
    /// Explain one prediction.
    Attribute(AttributeArgs),
    /// Serve a workspace over HTTP.
    Serve(ServeArgs),
    /// Re-run recorded stages and verify their outputs are identical.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "preset")]
    pub scenario: Option<PathBuf>,
    /// Built-in scenario (planted-routes).
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw CSV; defaults to records.csv in the workspace.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Grid size as ROWSxCOLS.
    #[arg(long, value_parser = parse_dims)]
    pub grid: Option<(usize, usize)>,
    #[arg(long)]
    pub slice_seconds: Option<f64>,
    #[arg(long)]
    pub epoch_origin: Option<f64>,
    /// lon_min,lat_min,lon_max,lat_max
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<[f64; 4]>,
    #[arg(long)]
    pub delimiter: Option<char>,
    /// The first row is a header.
    #[arg(long)]
    pub header: bool,
    /// Column positions as id,timestamp,lon,lat.
    #[arg(long, value_parser = parse_columns)]
    pub columns: Option<[usize; 4]>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long)]
    pub history: Option<usize>,
    #[arg(long)]
    pub no_intercept: bool,
}

#[derive(Debug, Args)]
pub struct KselectArgs {
    #[arg(long)]
    pub kmin: Option<usize>,
    #[arg(long)]
    pub kmax: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    /// cell:ROW,COL or region:ID
    #[arg(long)]
    pub target: TargetKind,
    #[arg(long, default_value = "in")]
    pub channel: Channel,
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    /// cell, region or region_merged
    #[arg(long, default_value = "cell")]
    pub grouping: Grouping,
    /// Newest slice of the explained window; defaults to the last slice.
    #[arg(long)]
    pub k: Option<i64>,
    /// Players under cell grouping: all, radius:R, region:ID
    #[arg(long, value_parser = parse_scope)]
    pub scope: Option<Scope>,
    #[arg(long)]
    pub nsamples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub exact_max: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// equal or proportional
    #[arg(long, default_value = "equal", value_parser = parse_split)]
    pub split: SplitMode,
    /// Rank trajectories on one channel instead of the combined total.
    #[arg(long)]
    pub rank_channel: Option<Channel>,
    #[arg(long, default_value = "attribution.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Workspace to publish; defaults to --workspace.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A manifest file, or a runs/ directory to replay in order.
    #[arg(long)]
    pub manifest: PathBuf,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("{s:?} is not ROWSxCOLS"))?;
    Ok((r.parse().map_err(|e| format!("{r}: {e}"))?, c.parse().map_err(|e| format!("{c}: {e}"))?))
}

fn parse_list<const N: usize, T: std::str::FromStr>(s: &str) -> Result<[T; N], String>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p}: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("{s:?} needs {N} comma-separated values"))
}

fn parse_bbox(s: &str) -> Result<[f64; 4], String> {
    parse_list(s)
}

fn parse_columns(s: &str) -> Result<[usize; 4], String> {
    parse_list(s)
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    match s.split_once(':') {
        None if s == "all" => Ok(Scope::All),
        Some(("radius", r)) => Ok(Scope::Radius {
            radius: r.parse().map_err(|e| format!("{r}: {e}"))?,
        }),
        Some(("region", r)) => Ok(Scope::Region {
            region: r.parse().map_err(|e| format!("{r}: {e}"))?,
        }),
        Some(("cells", list)) => list
            .split(';')
            .map(|rc| {
                let (r, c) = rc.split_once(',').ok_or_else(|| format!("cell {rc:?} is not r,c"))?;
                Ok(Cell::new(
                    r.trim().parse().map_err(|e| format!("{r}: {e}"))?,
                    c.trim().parse().map_err(|e| format!("{c}: {e}"))?,
                ))
            })
            .collect::<Result<_, String>>()
            .map(|cells| Scope::Cells { cells }),
        _ => Err(format!("scope {s:?} is not all, radius:R, region:ID or cells:r,c;r,c")),
    }
}

fn parse_split(s: &str) -> Result<SplitMode, String> {
    match s {
        "equal" => Ok(SplitMode::Equal),
        "proportional" => Ok(SplitMode::Proportional),
        other => Err(format!("unknown split {other:?} (expected equal|proportional)")),
    }
}

pub struct Ctx {
    pub layout: Layout,
    pub config: ToolConfig,
    pub config_file: Option<PathBuf>,
}

impl Ctx {
    pub fn new(workspace: &Path, config_file: Option<&Path>) -> anyhow::Result<Self> {
        let config = match config_file {
            Some(p) => ToolConfig::load(p)?,
            None => ToolConfig::default(),
        };
        Ok(Self {
            layout: Layout::new(workspace),
            config,
            config_file: config_file.map(Path::to_path_buf),
        })
    }
}

/// Turns flags plus config into a self-contained stage.
pub fn resolve(ctx: &Ctx, command: &Command) -> anyhow::Result<Option<Step>> {
    let cfg = &ctx.config;
    Ok(Some(match command {
        Command::Synth(a) => {
            let from_flags = a.scenario.is_some() || a.preset.is_some();
            let (file, preset) = if from_flags {
                (a.scenario.as_ref(), a.preset.as_ref())
            } else {
                (cfg.synth.scenario.as_ref(), cfg.synth.preset.as_ref())
            };
            let seed = a.seed.or(cfg.synth.seed);
            let scenario = match (file, preset) {
                (Some(path), _) => {
                    let mut s: Scenario = read_json(&steps::resolve_path(&ctx.layout, path))?;
                    if let Some(seed) = seed {
                        s.seed = seed;
                    }
                    s
                }
                (None, Some(p)) if p == "planted-routes" => planted_routes_scenario(seed.unwrap_or(7)),
                (None, Some(p)) => bail!("unknown preset {p:?} (expected planted-routes)"),
                (None, None) => bail!("synth needs --scenario or --preset"),
            };
            scenario.validate()?;
            Step::Synth { scenario }
        }
        Command::Ingest(a) => {
            let input = a.input.clone().or_else(|| cfg.ingest.input.clone()).unwrap_or_else(|| "records.csv".into());
            let mut columns = ColumnMapping::default();
            if let Some([id, ts, lon, lat]) = a.columns.or(cfg.ingest.columns) {
                columns = ColumnMapping {
                    id,
                    timestamp: ts,
                    lon,
                    lat,
                    ..columns
                };
            }
            if let Some(d) = a.delimiter.or(cfg.ingest.delimiter) {
                columns.delimiter = u8::try_from(d).map_err(|_| anyhow!("delimiter {d:?} is not a single byte"))?;
            }
            columns.has_header = a.header || cfg.ingest.has_header.unwrap_or(false);
            let grid = resolve_grid(ctx, a, &input, &columns)?;
            Step::Ingest { input, grid, columns }
        }
        Command::Flow => Step::Flow,
        Command::Train(a) => {
            let d = LinearConfig::default();
            Step::Train {
                model: a.model.or(cfg.train.model).unwrap_or_default(),
                linear: LinearConfig {
                    lambda: a.lambda.or(cfg.train.lambda).unwrap_or(d.lambda),
                    radius: a.radius.or(cfg.train.radius).unwrap_or(d.radius),
                    history: a.history.or(cfg.train.history).unwrap_or(d.history),
                    intercept: !a.no_intercept && cfg.train.intercept.unwrap_or(d.intercept),
                },
            }
        }
        Command::Kselect(a) => Step::Kselect {
            kmin: a.kmin.or(cfg.regions.kmin).unwrap_or(1),
            kmax: a.kmax.or(cfg.regions.kmax).unwrap_or(26),
            seed: a.seed.or(cfg.regions.seed).unwrap_or(7),
        },
        Command::Partition(a) => Step::Partition {
            k: a.k.or(cfg.regions.k).unwrap_or(21),
            seed: a.seed.or(cfg.regions.seed).unwrap_or(7),
        },
        Command::Attribute(a) => {
            let k = match a.k {
                Some(k) => k,
                None => {
                    let range: serde_json::Value = read_json(&ctx.layout.series())?;
                    range["last"].as_i64().ok_or_else(|| anyhow!("flows/series.json has no last slice"))?
                }
            };
            Step::Attribute {
                request: AttributionRequest {
                    k,
                    target: a.target,
                    channel: a.channel,
                    horizon: a.horizon,
                    grouping: a.grouping,
                    scope: a.scope.clone().unwrap_or_default(),
                    explain: cfg.explain.resolve(a.nsamples, a.seed, a.exact_max),
                    split: a.split,
                    top_k: a.top_k.or(cfg.explain.top_k).unwrap_or(5),
                    rank_channel: a.rank_channel,
                },
                out: a.out.clone(),
            }
        }
        Command::Serve(_) | Command::Replay(_) => return Ok(None),
    }))
}

fn resolve_grid(ctx: &Ctx, a: &IngestArgs, input: &Path, columns: &ColumnMapping) -> anyhow::Result<GridSpec> {
    let g = &ctx.config.grid;
    let scenario_path = ctx.layout.path("scenario.json");
    let base = if scenario_path.exists() {
        Some(read_json::<Scenario>(&scenario_path)?.grid)
    } else {
        None
    };
    let (rows, cols) = a
        .grid
        .or(g.rows.zip(g.cols))
        .or(base.map(|b| (b.rows, b.cols)))
        .unwrap_or((GridSpec::DEFAULT_ROWS, GridSpec::DEFAULT_COLS));
    let slice = a
        .slice_seconds
        .or(g.slice_seconds)
        .or(base.map(|b| b.slice_seconds))
        .unwrap_or(GridSpec::DEFAULT_SLICE_SECONDS);
    let origin = a.epoch_origin.or(g.epoch_origin).or(base.map(|b| b.epoch_origin)).unwrap_or(0.0);
    let bbox = match a.bbox.or(g.bbox).or(base.map(|b| b.bbox())) {
        Some(b) => b,
        None => data_extent(&steps::resolve_path(&ctx.layout, input), columns)?,
    };
    Ok(GridSpec::new(bbox, rows, cols, slice, origin)?)
}

fn data_extent(path: &Path, columns: &ColumnMapping) -> anyhow::Result<[f64; 4]> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let parsed = parse_trajectories(std::io::BufReader::new(file), columns)?;
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for r in parsed.trajectories.values().flatten() {
        b = [b[0].min(r.lon), b[1].min(r.lat), b[2].max(r.lon), b[3].max(r.lat)];
    }
    if !(b[0] < b[2] && b[1] < b[3]) {
        bail!("cannot infer a bounding box from {}; pass --bbox", path.display());
    }
    Ok(b)
}

/// Runs one parsed command line; returns the text to print on success.
pub fn run(cli: &Cli) -> anyhow::Result<String> {
    let ctx = Ctx::new(&cli.workspace, cli.config.as_deref())?;
    match &cli.command {
        Command::Serve(a) => {
            serve(&ctx, a)?;
            Ok(String::new())
        }
        Command::Replay(a) => replay(&ctx, a),
        other => {
            let step = resolve(&ctx, other)?.expect("stage commands resolve");
            let (manifest, outcome) = manifest::run_recorded(&ctx.layout, &step, ctx.config_file.as_deref())?;
            Ok(format!(
                "{}\n{} done in {:.3}s, manifest runs/{:03}-{}.json",
                outcome.report, manifest.command, manifest.wall_seconds, manifest.sequence, manifest.command
            ))
        }
    }
}

fn replay(ctx: &Ctx, a: &ReplayArgs) -> anyhow::Result<String> {
    let files = if a.manifest.is_dir() {
        manifest::manifest_files(&a.manifest)?
    } else {
        vec![a.manifest.clone()]
    };
    if files.is_empty() {
        bail!("no manifests in {}", a.manifest.display());
    }
    let mut out = Vec::new();
    for f in files {
        let m = manifest::load(&f)?;
        let fresh = manifest::replay_one(&ctx.layout, &m).with_context(|| format!("replaying {}", f.display()))?;
        out.push(format!("{} reproduced {} artifacts", m.command, fresh.outputs.len()));
    }
    Ok(out.join("\n"))
}

fn serve(ctx: &Ctx, a: &ServeArgs) -> anyhow::Result<()> {
    let mut config = ctx.config.service.clone().with_env()?;
    if let Some(h) = &a.host {
        config.host = h.clone();
    }
    if let Some(p) = a.port {
        config.port = p;
    }
    if let Some(w) = a.workers {
        config.workers = w;
    }
    let dir = a.snapshot.clone().or_else(|| config.snapshot.clone()).unwrap_or_else(|| ctx.layout.root.clone());
    let dataset = a.dataset.clone().or_else(|| config.dataset.clone());
    let snapshot = Snapshot::load(&dir, dataset)?;
    tracing::info!("publishing dataset {} from {}", snapshot.dataset, dir.display());
    let state = flowlens_service::AppState::with_snapshot(config, snapshot);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(flowlens_service::serve(state))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_parsers() {
        assert_eq!(parse_dims("38x36").unwrap(), (38, 36));
        assert!(parse_dims("38").is_err());
        assert_eq!(parse_bbox("0,1,2,3").unwrap(), [0.0, 1.0, 2.0, 3.0]);
        assert!(parse_bbox("0,1,2").is_err());
        assert_eq!(parse_scope("radius:3").unwrap(), Scope::Radius { radius: 3 });
        assert_eq!(parse_scope("all").unwrap(), Scope::All);
        assert_eq!(parse_scope("region:4").unwrap(), Scope::Region { region: 4 });
        assert!(parse_scope("ring:1").is_err());
        assert_eq!(
            parse_scope("cells:1,2;3,4").unwrap(),
            Scope::Cells {
                cells: vec![Cell::new(1, 2), Cell::new(3, 4)]
            }
        );
        assert!(parse_scope("cells:1").is_err());
        assert_eq!(parse_split("proportional").unwrap(), SplitMode::Proportional);
    }

    #[test]
    fn command_line_shapes() {
        let cli = Cli::try_parse_from([
            "flowlens", "attribute", "--target", "cell:6,6", "--channel", "in", "--horizon", "2", "--grouping", "region", "--nsamples", "4096",
            "--seed", "7",
        ])
        .unwrap();
        match cli.command {
            Command::Attribute(a) => {
                assert_eq!(a.target, TargetKind::Cell { row: 6, col: 6 });
                assert_eq!(a.grouping, Grouping::PerRegion);
                assert_eq!(a.nsamples, Some(4096));
            }
            other => panic!("{other:?}"),
        }
        let err = Cli::try_parse_from(["flowlens", "flow", "--bogus"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
