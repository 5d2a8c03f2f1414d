//! Shapley attribution of a predicted cell or region value.
//!
//! Players are input features `(channel, cell, tau)` of the history window,
//! optionally grouped (one group per aggregated region, for instance). A
//! coalition keeps its members at the explained input's values; every other
//! group takes the background's values. Per-cell attributions can then be
//! split over the trajectories that produced each cell's flow.

mod shapley;
mod trajectory;
mod value;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Channel;
use crate::ingest::Cell;
use crate::predictor::PredictError;

pub use shapley::{shapley_exact, shapley_sampled, CoalitionValue, FnValue, MAX_EXACT_PLAYERS};
pub use trajectory::{time_channel_aggregate, top_k, top_k_by, trajectory_shap, SplitMode, TrajectoryAttribution, TrajectoryScore};
pub use value::{region_shap, value_function, ExplainConfig, MaskedPredictorValue};

#[derive(Debug, Error, PartialEq)]
pub enum AttributionError {
    #[error("{p} players is too many for exact enumeration (max {max}); use the sampled estimator")]
    TooManyPlayers { p: usize, max: usize },
    #[error("nsamples {nsamples} below the minimum {min} for {p} players")]
    TooFewSamples { nsamples: usize, min: usize, p: usize },
    #[error("sampled coalition matrix stayed degenerate after {0} attempts")]
    Degenerate(usize),
    #[error("feature space is empty")]
    NoPlayers,
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("invalid feature space: {0}")]
    InvalidFeatures(String),
    #[error("background dims do not match the explained input")]
    BackgroundMismatch,
    #[error("trajectory attribution needs per-cell features")]
    NotPerCell,
    #[error("index count {got} does not match history length {expected}")]
    IndexLength { expected: usize, got: usize },
    #[error("predictor failed while evaluating a coalition: {0}")]
    Predictor(#[from] PredictError),
}

/// One input feature: a cell's channel value at history position `tau`.
///
/// Serialized as the string `c2:i:j:tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureKey {
    pub channel: Channel,
    pub cell: Cell,
    pub tau: usize,
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.channel, self.cell.row, self.cell.col, self.tau)
    }
}

impl FromStr for FeatureKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(format!("feature key {s:?} is not c2:i:j:tau"));
        }
        let num = |p: &str| p.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
        Ok(FeatureKey {
            channel: parts[0].parse()?,
            cell: Cell::new(num(parts[1])?, num(parts[2])?),
            tau: num(parts[3])?,
        })
    }
}

impl Serialize for FeatureKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub label: String,
    pub members: Vec<FeatureKey>,
}

/// Ordered players of an attribution, each a group of input features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub groups: Vec<FeatureGroup>,
}

/// How players are formed from the input features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One player per (channel, cell, tau).
    PerCell,
    /// One player per (channel, region, tau).
    PerRegion,
    /// One player per region, all channels and time steps together.
    PerRegionMerged,
}

impl FromStr for Grouping {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cell" | "per_cell" => Ok(Grouping::PerCell),
            "region" | "per_region" => Ok(Grouping::PerRegion),
            "region_merged" | "per_region_merged" => Ok(Grouping::PerRegionMerged),
            other => Err(format!("unknown grouping {other:?} (expected cell|region|region_merged)")),
        }
    }
}

impl FeatureSpace {
    /// Per-cell players over `cells` (all cells when `None`), channel-major then cell then tau.
    pub fn per_cell(rows: usize, cols: usize, history: usize, cells: Option<&[Cell]>) -> Self {
        let all: Vec<Cell>;
        let cells = match cells {
            Some(c) => c,
            None => {
                all = (0..rows).flat_map(|r| (0..cols).map(move |c| Cell::new(r, c))).collect();
                &all
            }
        };
        let mut groups = Vec::with_capacity(2 * cells.len() * history);
        for channel in Channel::ALL {
            for &cell in cells {
                for tau in 0..history {
                    let key = FeatureKey { channel, cell, tau };
                    groups.push(FeatureGroup {
                        label: key.to_string(),
                        members: vec![key],
                    });
                }
            }
        }
        Self { groups }
    }

    /// Region groups from a row-major cell->region map.
    pub fn per_region(cols: usize, history: usize, cell_region: &[usize], merged: bool) -> Self {
        let regions = cell_region.iter().copied().max().map_or(0, |m| m + 1);
        let cells_of = |r: usize| {
            cell_region
                .iter()
                .enumerate()
                .filter(move |(_, &reg)| reg == r)
                .map(move |(i, _)| Cell::new(i / cols, i % cols))
        };
        let mut groups = Vec::new();
        if merged {
            for r in 0..regions {
                let members: Vec<FeatureKey> = Channel::ALL
                    .iter()
                    .flat_map(|&channel| cells_of(r).flat_map(move |cell| (0..history).map(move |tau| FeatureKey { channel, cell, tau })))
                    .collect();
                if !members.is_empty() {
                    groups.push(FeatureGroup {
                        label: format!("r{r}"),
                        members,
                    });
                }
            }
        } else {
            for channel in Channel::ALL {
                for r in 0..regions {
                    for tau in 0..history {
                        let members: Vec<FeatureKey> = cells_of(r).map(|cell| FeatureKey { channel, cell, tau }).collect();
                        if !members.is_empty() {
                            groups.push(FeatureGroup {
                                label: format!("{channel}:r{r}:{tau}"),
                                members,
                            });
                        }
                    }
                }
            }
        }
        Self { groups }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// True when every group holds exactly one feature.
    pub fn is_per_cell(&self) -> bool {
        self.groups.iter().all(|g| g.members.len() == 1)
    }

    /// Checks groups are disjoint and inside the given dims.
    pub fn validate(&self, rows: usize, cols: usize, history: usize) -> Result<(), AttributionError> {
        if self.groups.is_empty() {
            return Err(AttributionError::NoPlayers);
        }
        let mut seen = std::collections::HashSet::new();
        for g in &self.groups {
            if g.members.is_empty() {
                return Err(AttributionError::InvalidFeatures(format!("group {} is empty", g.label)));
            }
            for m in &g.members {
                if m.cell.row >= rows || m.cell.col >= cols || m.tau >= history {
                    return Err(AttributionError::InvalidFeatures(format!("feature {m} out of range")));
                }
                if !seen.insert(*m) {
                    return Err(AttributionError::InvalidFeatures(format!("feature {m} in more than one group")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetKind {
    Cell { row: usize, col: usize },
    Region { region: usize },
}

impl FromStr for TargetKind {
    type Err = String;
    /// `cell:u,v` or `region:id`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| format!("target {s:?} is not cell:u,v or region:id"))?;
        match kind {
            "cell" => {
                let (u, v) = rest.split_once(',').ok_or_else(|| format!("cell target {rest:?} is not u,v"))?;
                Ok(TargetKind::Cell {
                    row: u.trim().parse().map_err(|e| format!("{u}: {e}"))?,
                    col: v.trim().parse().map_err(|e| format!("{v}: {e}"))?,
                })
            }
            "region" => Ok(TargetKind::Region {
                region: rest.trim().parse().map_err(|e| format!("{rest}: {e}"))?,
            }),
            other => Err(format!("unknown target kind {other:?}")),
        }
    }
}

/// What is being explained: one output entry or a region sum, at horizon `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub target: TargetKind,
    pub channel: Channel,
    pub horizon: usize,
}

impl TargetSpec {
    pub fn cell(row: usize, col: usize, channel: Channel, horizon: usize) -> Self {
        Self {
            target: TargetKind::Cell { row, col },
            channel,
            horizon,
        }
    }

    /// Output cells summed by this target.
    pub fn cells(&self, rows: usize, cols: usize, cell_region: Option<&[usize]>) -> Result<Vec<Cell>, AttributionError> {
        if self.horizon == 0 {
            return Err(AttributionError::InvalidTarget("horizon must be >= 1".into()));
        }
        match self.target {
            TargetKind::Cell { row, col } => {
                if row >= rows || col >= cols {
                    return Err(AttributionError::InvalidTarget(format!("cell ({row},{col}) outside {rows}x{cols}")));
                }
                Ok(vec![Cell::new(row, col)])
            }
            TargetKind::Region { region } => {
                let map = cell_region.ok_or_else(|| AttributionError::InvalidTarget("region target without a partition".into()))?;
                let cells: Vec<Cell> = map
                    .iter()
                    .enumerate()
                    .filter(|(_, &r)| r == region)
                    .map(|(i, _)| Cell::new(i / cols, i % cols))
                    .collect();
                if cells.is_empty() {
                    return Err(AttributionError::InvalidTarget(format!("unknown region {region}")));
                }
                Ok(cells)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Estimator {
    Exact,
    Sampled { nsamples: usize, seed: u64 },
}

/// Shapley values for one value function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub phi: Vec<f64>,
    /// Value of the empty coalition (all background).
    pub base_value: f64,
    /// Value of the full coalition (the explained input).
    pub full_value: f64,
    pub estimator: Estimator,
}

impl AttributionResult {
    /// `sum(phi) - (full - base)`.
    pub fn efficiency_residual(&self) -> f64 {
        self.phi.iter().sum::<f64>() - (self.full_value - self.base_value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub key: String,
    pub phi: f64,
}

/// A region-SHAP result indexed back to its feature groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAttribution {
    pub target: TargetSpec,
    pub grouping: Grouping,
    pub history: usize,
    pub space: FeatureSpace,
    pub result: AttributionResult,
}

impl RegionAttribution {
    pub fn attributions(&self) -> Vec<FeatureAttribution> {
        self.space
            .groups
            .iter()
            .zip(&self.result.phi)
            .map(|(g, &phi)| FeatureAttribution {
                key: g.label.clone(),
                phi,
            })
            .collect()
    }

    pub fn phi_of(&self, label: &str) -> Option<f64> {
        self.space.groups.iter().position(|g| g.label == label).map(|i| self.result.phi[i])
    }
}
