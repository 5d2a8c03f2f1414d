//! On-disk workspace layout and the immutable snapshot loaded from it.
//!
//! ```text
//! grid.json                 GridSpec
//! records.csv               raw trajectories (id,timestamp,lon,lat)
//! intersections.csv         id,lon,lat
//! planted.json              synthetic ground truth, when generated
//! snapped.jsonl             one SnappedTrajectory per line
//! flows/series.json         {first, last}
//! flows/flow_{k}.bin        little-endian u32 [channel][row][col]
//! flows/flow_{k}.json       {k, M, N, checksum}
//! flows/index.jsonl         cell -> trajectory lists, all slices
//! model.json / model.bin    model metadata and little-endian f64 parameters
//! background.json           reference history window
//! partition.json            RegionPartition
//! partition.geojson         the same partition as a FeatureCollection
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{checksum, CellTrajectoryIndex, FlowSidecar, FlowTensor};
use crate::ingest::{GridSpec, SnappedTrajectory};
use crate::pipeline::{ExplainContext, FlowSeries};
use crate::predictor::{FittedModel, HistoryWindow, ModelMeta};
use crate::regions::RegionPartition;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
}

impl StoreError {
    fn io(path: &Path, cause: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            cause,
        }
    }

    fn format(path: &Path, message: impl ToString) -> Self {
        StoreError::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    }
    let name = path.file_name().ok_or_else(|| StoreError::format(path, "not a file path"))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| StoreError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(|e| StoreError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, StoreError> {
    fs::read_to_string(path).map_err(|e| StoreError::io(path, e))
}

pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("artifact serializes");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), StoreError> {
    write_atomic(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::format(path, e))
}

/// Paths of every artifact under one workspace directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn grid(&self) -> PathBuf {
        self.path("grid.json")
    }

    pub fn records(&self) -> PathBuf {
        self.path("records.csv")
    }

    pub fn intersections(&self) -> PathBuf {
        self.path("intersections.csv")
    }

    pub fn planted(&self) -> PathBuf {
        self.path("planted.json")
    }

    pub fn snapped(&self) -> PathBuf {
        self.path("snapped.jsonl")
    }

    pub fn flows_dir(&self) -> PathBuf {
        self.path("flows")
    }

    pub fn series(&self) -> PathBuf {
        self.flows_dir().join("series.json")
    }

    pub fn flow_payload(&self, k: i64) -> PathBuf {
        self.flows_dir().join(format!("flow_{k}.bin"))
    }

    pub fn flow_sidecar(&self, k: i64) -> PathBuf {
        self.flows_dir().join(format!("flow_{k}.json"))
    }

    pub fn index(&self) -> PathBuf {
        self.flows_dir().join("index.jsonl")
    }

    pub fn model_meta(&self) -> PathBuf {
        self.path("model.json")
    }

    pub fn model_params(&self) -> PathBuf {
        self.path("model.bin")
    }

    pub fn background(&self) -> PathBuf {
        self.path("background.json")
    }

    pub fn partition(&self) -> PathBuf {
        self.path("partition.json")
    }

    pub fn geojson(&self) -> PathBuf {
        self.path("partition.geojson")
    }

    pub fn kselect(&self) -> PathBuf {
        self.path("kselect.json")
    }
}

pub fn save_snapped(path: &Path, trajs: &[SnappedTrajectory]) -> Result<(), StoreError> {
    let mut out = Vec::new();
    for t in trajs {
        serde_json::to_writer(&mut out, t).expect("trajectory serializes");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn load_snapped(path: &Path) -> Result<Vec<SnappedTrajectory>, StoreError> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| StoreError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct SeriesRange {
    first: i64,
    last: i64,
}

pub fn save_series(layout: &Layout, series: &FlowSeries) -> Result<(), StoreError> {
    for t in &series.tensors {
        write_atomic(&layout.flow_payload(t.slice), &t.to_le_bytes())?;
        write_json(&layout.flow_sidecar(t.slice), &t.sidecar())?;
    }
    let index: String = series.indices.iter().map(CellTrajectoryIndex::to_json_lines).collect();
    write_atomic(&layout.index(), index.as_bytes())?;
    write_json(
        &layout.series(),
        &SeriesRange {
            first: series.first,
            last: series.last(),
        },
    )
}

pub fn load_flow(layout: &Layout, grid: &GridSpec, k: i64) -> Result<FlowTensor, StoreError> {
    let meta_path = layout.flow_sidecar(k);
    let meta: FlowSidecar = read_json(&meta_path)?;
    if meta.k != k || meta.rows != grid.rows || meta.cols != grid.cols {
        return Err(StoreError::format(&meta_path, "sidecar does not match the grid"));
    }
    let path = layout.flow_payload(k);
    let bytes = read_bytes(&path)?;
    if checksum(&bytes) != meta.checksum {
        return Err(StoreError::Checksum { path });
    }
    FlowTensor::from_le_bytes(k, grid.rows, grid.cols, &bytes).map_err(|e| StoreError::format(&path, e))
}

pub fn load_series(layout: &Layout, grid: &GridSpec) -> Result<FlowSeries, StoreError> {
    let range: SeriesRange = read_json(&layout.series())?;
    let tensors = (range.first..=range.last)
        .map(|k| load_flow(layout, grid, k))
        .collect::<Result<Vec<_>, _>>()?;
    let index_path = layout.index();
    let mut by_slice = CellTrajectoryIndex::from_json_lines(&read_text(&index_path)?).map_err(|e| StoreError::format(&index_path, e))?;
    let indices = (range.first..=range.last)
        .map(|k| {
            by_slice.remove(&k).unwrap_or_else(|| CellTrajectoryIndex {
                slice: k,
                ..Default::default()
            })
        })
        .collect();
    Ok(FlowSeries {
        grid: *grid,
        first: range.first,
        tensors,
        indices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    #[serde(flatten)]
    meta: ModelMeta,
    checksum: String,
}

pub fn save_model(layout: &Layout, model: &FittedModel) -> Result<(), StoreError> {
    let params = model.params_le_bytes();
    write_atomic(&layout.model_params(), &params)?;
    write_json(
        &layout.model_meta(),
        &ModelFile {
            meta: model.meta(),
            checksum: checksum(&params),
        },
    )
}

pub fn load_model(layout: &Layout) -> Result<FittedModel, StoreError> {
    let file: ModelFile = read_json(&layout.model_meta())?;
    let path = layout.model_params();
    let params = read_bytes(&path)?;
    if checksum(&params) != file.checksum {
        return Err(StoreError::Checksum { path });
    }
    FittedModel::from_parts(&file.meta, &params).map_err(|e| StoreError::format(&path, e))
}

pub fn save_partition(layout: &Layout, partition: &RegionPartition) -> Result<(), StoreError> {
    write_json(&layout.partition(), partition)?;
    write_json(&layout.geojson(), &partition.to_geojson())
}

/// Everything the service serves, loaded once and never mutated.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub dataset: String,
    pub grid: GridSpec,
    pub series: FlowSeries,
    pub model: FittedModel,
    pub background: HistoryWindow,
    pub partition: Option<RegionPartition>,
    /// Snapped trajectories by id, for drawing attributed routes.
    pub trajectories: BTreeMap<String, SnappedTrajectory>,
}

impl Snapshot {
    /// Loads a workspace; the dataset id defaults to the directory name.
    pub fn load(root: &Path, dataset: Option<String>) -> Result<Self, StoreError> {
        let layout = Layout::new(root);
        let grid: GridSpec = read_json(&layout.grid())?;
        let series = load_series(&layout, &grid)?;
        let model = load_model(&layout)?;
        let background: HistoryWindow = read_json(&layout.background())?;
        if background.dims() != (grid.rows, grid.cols) || background.len() != model.history_len() {
            return Err(StoreError::format(&layout.background(), "background does not match the grid and model"));
        }
        let partition_path = layout.partition();
        let partition = if partition_path.exists() {
            let p: RegionPartition = read_json(&partition_path)?;
            if (p.rows, p.cols) != (grid.rows, grid.cols) {
                return Err(StoreError::format(&partition_path, "partition does not match the grid"));
            }
            Some(p)
        } else {
            None
        };
        let snapped_path = layout.snapped();
        let trajectories = if snapped_path.exists() {
            load_snapped(&snapped_path)?.into_iter().map(|t| (t.trajectory_id.clone(), t)).collect()
        } else {
            BTreeMap::new()
        };
        let dataset = dataset.unwrap_or_else(|| {
            root.canonicalize()
                .ok()
                .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "default".into())
        });
        Ok(Self {
            dataset,
            grid,
            series,
            model,
            background,
            partition,
            trajectories,
        })
    }

    /// Centres of the cells a trajectory visits in slices `first..=last`, in visiting order.
    pub fn path(&self, trajectory_id: &str, first: i64, last: i64) -> Vec<[f64; 2]> {
        let Some(t) = self.trajectories.get(trajectory_id) else {
            return Vec::new();
        };
        let mut out: Vec<[f64; 2]> = Vec::new();
        for s in t.samples.iter().filter(|s| (first..=last).contains(&s.slice)) {
            let (lon, lat) = self.grid.cell_center(s.cell);
            if out.last() != Some(&[lon, lat]) {
                out.push([lon, lat]);
            }
        }
        out
    }

    pub fn context(&self) -> ExplainContext<'_> {
        ExplainContext {
            series: &self.series,
            model: &self.model,
            background: &self.background,
            partition: self.partition.as_ref(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_trajectories, snap_all, write_trajectories, ColumnMapping};
    use crate::pipeline::{train, ModelKind};
    use crate::predictor::LinearConfig;
    use crate::regions::{kmeans, partition};
    use crate::synthkit::{generate, planted_routes_scenario};

    fn populate(dir: &Path) -> Snapshot {
        let scenario = planted_routes_scenario(3);
        let out = generate(&scenario).unwrap();
        let mut csv = Vec::new();
        write_trajectories(&mut csv, &out.records).unwrap();
        let parsed = parse_trajectories(&csv[..], &ColumnMapping::default()).unwrap();
        let snapped = snap_all(&parsed, &scenario.grid).unwrap().trajectories;
        let series = FlowSeries::build(&scenario.grid, &snapped).unwrap();
        let model = train(&series, ModelKind::Linear, LinearConfig::default()).unwrap();
        let background = series.background(model.history_len()).unwrap();
        let clustering = kmeans(&out.intersections, 5, 2).unwrap();
        let p = partition(&out.intersections, &clustering, &scenario.grid).unwrap();

        let layout = Layout::new(dir);
        write_json(&layout.grid(), &scenario.grid).unwrap();
        save_snapped(&layout.snapped(), &snapped).unwrap();
        save_series(&layout, &series).unwrap();
        save_model(&layout, &model).unwrap();
        write_json(&layout.background(), &background).unwrap();
        save_partition(&layout, &p).unwrap();
        assert_eq!(load_snapped(&layout.snapped()).unwrap(), snapped);
        Snapshot {
            dataset: "t".into(),
            grid: scenario.grid,
            series,
            model,
            background,
            partition: Some(p),
            trajectories: snapped.into_iter().map(|t| (t.trajectory_id.clone(), t)).collect(),
        }
    }

    #[test]
    fn workspace_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let expected = populate(dir.path());
        let loaded = Snapshot::load(dir.path(), Some("t".into())).unwrap();
        assert_eq!(loaded.grid, expected.grid);
        assert_eq!(loaded.series, expected.series);
        assert_eq!(loaded.model, expected.model);
        assert_eq!(loaded.background, expected.background);
        assert_eq!(loaded.partition, expected.partition);
        assert_eq!(loaded.trajectories, expected.trajectories);
        let (id, t) = loaded.trajectories.iter().next().unwrap();
        let k = t.samples[0].slice;
        let path = loaded.path(id, k, k);
        assert!(!path.is_empty());
        assert_eq!(path[0], {
            let (lon, lat) = loaded.grid.cell_center(t.samples[0].cell);
            [lon, lat]
        });
        assert!(loaded.path("missing", k, k).is_empty());
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = populate(dir.path());
        let layout = Layout::new(dir.path());
        let path = layout.flow_payload(s.series.first);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Snapshot::load(dir.path(), None), Err(StoreError::Checksum { .. })));
    }

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/x.json");
        write_json(&path, &[1, 2, 3]).unwrap();
        write_json(&path, &[4]).unwrap();
        let v: Vec<i32> = read_json(&path).unwrap();
        assert_eq!(v, vec![4]);
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn missing_artifact_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = Snapshot::load(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("grid.json"), "{err}");
    }
}
