//! In/out-flow tensors per time slice and their per-trajectory decomposition.
//!
//! A transition between consecutive samples `prev -> cur` in different cells
//! adds one out-flow to `prev`'s cell and one in-flow to `cur`'s cell, both
//! credited to the slice of `cur`. Summing the per-trajectory tensors gives
//! the grid tensor exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Cell, GridSpec, SnappedTrajectory};

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("trajectory {0} was snapped on a different grid")]
    MixedGrid(String),
    #[error("tensor dims mismatch: expected {expected:?}, got {got:?}")]
    Dims { expected: (usize, usize), got: (usize, usize) },
    #[error("tensor payload has {got} values, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("checksum mismatch")]
    Checksum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    In,
    Out,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::In, Channel::Out];

    pub fn index(self) -> usize {
        match self {
            Channel::In => 0,
            Channel::Out => 1,
        }
    }

    pub fn from_index(i: usize) -> Channel {
        if i == 0 {
            Channel::In
        } else {
            Channel::Out
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::In => "in",
            Channel::Out => "out",
        })
    }
}

impl FromStr for Channel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "in" => Ok(Channel::In),
            "out" => Ok(Channel::Out),
            other => Err(format!("unknown channel {other:?} (expected in|out)")),
        }
    }
}

/// Dense `[channel][row][col]` counts for one slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowTensor {
    pub slice: i64,
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u32>,
}

impl FlowTensor {
    pub fn zeros(slice: i64, rows: usize, cols: usize) -> Self {
        Self {
            slice,
            rows,
            cols,
            counts: vec![0; 2 * rows * cols],
        }
    }

    #[inline]
    pub fn offset(&self, channel: Channel, cell: Cell) -> usize {
        (channel.index() * self.rows + cell.row) * self.cols + cell.col
    }

    pub fn get(&self, channel: Channel, cell: Cell) -> u32 {
        self.counts[self.offset(channel, cell)]
    }

    pub fn add(&mut self, channel: Channel, cell: Cell, n: u32) {
        let i = self.offset(channel, cell);
        self.counts[i] += n;
    }

    pub fn total(&self, channel: Channel) -> u64 {
        let plane = self.rows * self.cols;
        let start = channel.index() * plane;
        self.counts[start..start + plane].iter().map(|&c| c as u64).sum()
    }

    /// Little-endian u32 payload in `[channel][row][col]` order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.counts.iter().flat_map(|c| c.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(slice: i64, rows: usize, cols: usize, bytes: &[u8]) -> Result<Self, FlowError> {
        let expected = 2 * rows * cols;
        if bytes.len() != expected * 4 {
            return Err(FlowError::Length {
                expected,
                got: bytes.len() / 4,
            });
        }
        let counts = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { slice, rows, cols, counts })
    }

    pub fn sidecar(&self) -> FlowSidecar {
        FlowSidecar {
            k: self.slice,
            rows: self.rows,
            cols: self.cols,
            checksum: checksum(&self.to_le_bytes()),
        }
    }

    /// Nested `[channel][row][col]` view for JSON payloads.
    pub fn nested(&self) -> Vec<Vec<Vec<u32>>> {
        (0..2)
            .map(|c| {
                (0..self.rows)
                    .map(|r| {
                        let start = (c * self.rows + r) * self.cols;
                        self.counts[start..start + self.cols].to_vec()
                    })
                    .collect()
            })
            .collect()
    }
}

/// JSON metadata written next to a raw tensor payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSidecar {
    pub k: i64,
    #[serde(rename = "M")]
    pub rows: usize,
    #[serde(rename = "N")]
    pub cols: usize,
    /// Hex SHA-256 of the payload bytes.
    pub checksum: String,
}

pub fn checksum(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub channel: Channel,
    pub cell: Cell,
}

/// Sparse transition counts of a single trajectory inside one slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryFlowTensor {
    pub trajectory_id: String,
    pub slice: i64,
    pub entries: BTreeMap<FlowKey, u32>,
}

impl TrajectoryFlowTensor {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, channel: Channel, cell: Cell) -> u32 {
        self.entries.get(&FlowKey { channel, cell }).copied().unwrap_or(0)
    }
}

pub fn transitions(traj: &SnappedTrajectory, k: i64) -> TrajectoryFlowTensor {
    let mut entries = BTreeMap::new();
    for pair in traj.samples.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        if cur.slice != k || prev.cell == cur.cell {
            continue;
        }
        *entries
            .entry(FlowKey {
                channel: Channel::Out,
                cell: prev.cell,
            })
            .or_insert(0) += 1;
        *entries
            .entry(FlowKey {
                channel: Channel::In,
                cell: cur.cell,
            })
            .or_insert(0) += 1;
    }
    TrajectoryFlowTensor {
        trajectory_id: traj.trajectory_id.clone(),
        slice: k,
        entries,
    }
}

/// Trajectories (with their counts) behind each nonzero entry of one slice's tensor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTrajectoryIndex {
    pub slice: i64,
    pub entries: BTreeMap<FlowKey, Vec<(String, u32)>>,
}

impl CellTrajectoryIndex {
    pub fn get(&self, channel: Channel, cell: Cell) -> &[(String, u32)] {
        self.entries
            .get(&FlowKey { channel, cell })
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// One JSON object per key, in key order.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for (key, trajs) in &self.entries {
            let line = IndexLine {
                k: self.slice,
                channel: key.channel,
                row: key.cell.row,
                col: key.cell.col,
                trajectories: trajs.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("index line serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses index lines, returning one index per slice.
    pub fn from_json_lines(text: &str) -> Result<BTreeMap<i64, CellTrajectoryIndex>, serde_json::Error> {
        let mut out: BTreeMap<i64, CellTrajectoryIndex> = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let l: IndexLine = serde_json::from_str(line)?;
            let idx = out.entry(l.k).or_insert_with(|| CellTrajectoryIndex {
                slice: l.k,
                entries: BTreeMap::new(),
            });
            idx.entries.insert(
                FlowKey {
                    channel: l.channel,
                    cell: Cell::new(l.row, l.col),
                },
                l.trajectories,
            );
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    k: i64,
    channel: Channel,
    row: usize,
    col: usize,
    trajectories: Vec<(String, u32)>,
}

/// Sums per-trajectory transitions for slice `k` into the grid tensor and its index.
pub fn build_flow(
    grid: &GridSpec,
    trajs: &[SnappedTrajectory],
    k: i64,
) -> Result<(FlowTensor, CellTrajectoryIndex), FlowError> {
    if let Some(bad) = trajs.iter().find(|t| t.grid != *grid) {
        return Err(FlowError::MixedGrid(bad.trajectory_id.clone()));
    }
    let parts: Vec<TrajectoryFlowTensor> = trajs
        .par_iter()
        .map(|t| transitions(t, k))
        .filter(|t| !t.is_empty())
        .collect();

    let mut tensor = FlowTensor::zeros(k, grid.rows, grid.cols);
    let mut index = CellTrajectoryIndex {
        slice: k,
        entries: BTreeMap::new(),
    };
    for part in parts {
        for (key, &n) in &part.entries {
            tensor.add(key.channel, key.cell, n);
            index
                .entries
                .entry(*key)
                .or_default()
                .push((part.trajectory_id.clone(), n));
        }
    }
    for list in index.entries.values_mut() {
        list.sort();
    }
    Ok((tensor, index))
}

/// Slice range `[first, last]` touched by any transition, if any.
pub fn slice_range(trajs: &[SnappedTrajectory]) -> Option<(i64, i64)> {
    trajs
        .iter()
        .flat_map(|t| t.samples.iter().skip(1).map(|s| s.slice))
        .fold(None, |acc, k| match acc {
            None => Some((k, k)),
            Some((lo, hi)) => Some((lo.min(k), hi.max(k))),
        })
}

/// Tensors and indices for every slice in `[first, last]`.
pub fn build_series(
    grid: &GridSpec,
    trajs: &[SnappedTrajectory],
    first: i64,
    last: i64,
) -> Result<Vec<(FlowTensor, CellTrajectoryIndex)>, FlowError> {
    if let Some(bad) = trajs.iter().find(|t| t.grid != *grid) {
        return Err(FlowError::MixedGrid(bad.trajectory_id.clone()));
    }
    (first..=last)
        .into_par_iter()
        .map(|k| build_flow(grid, trajs, k))
        .collect()
}
