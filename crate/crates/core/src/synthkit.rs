//! Synthetic intersections and trajectory populations with planted surges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Cell, GridSpec, RawTrajectoryRecord};
use crate::regions::Intersection;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Order in which an L-shaped path covers its two legs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathPolicy {
    #[default]
    RowFirst,
    ColumnFirst,
    /// Either order, drawn per trajectory.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdPattern {
    #[serde(default)]
    pub name: Option<String>,
    pub origin: Cell,
    pub destination: Cell,
    /// Mean departures per slice.
    pub rate: f64,
    #[serde(default)]
    pub policy: PathPolicy,
    /// First active slice, counted from the scenario start.
    #[serde(default)]
    pub start: usize,
    /// One past the last active slice; the scenario end when absent.
    #[serde(default)]
    pub end: Option<usize>,
    /// Restricts activity to a recurring window inside `start..end`.
    #[serde(default)]
    pub repeat: Option<Repeat>,
    /// Marks the pattern as a planted cause.
    #[serde(default)]
    pub planted: Option<String>,
}

/// Active for the first `active` slices of every `every`, counted from the pattern start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repeat {
    pub every: usize,
    pub active: usize,
}

impl OdPattern {
    pub fn is_active(&self, s: usize, duration: usize) -> bool {
        let end = self.end.unwrap_or(duration).min(duration);
        if s < self.start || s >= end {
            return false;
        }
        self.repeat.is_none_or(|r| (s - self.start) % r.every < r.active)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub lon: f64,
    pub lat: f64,
    pub sigma: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionLayout {
    pub count: usize,
    pub seed: u64,
    /// Gaussian clusters; intersections not drawn from one are uniform over the bbox.
    #[serde(default)]
    pub hotspots: Vec<Hotspot>,
    /// Relative weight of the uniform component.
    #[serde(default = "one")]
    pub uniform_weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Random OD pairs spread uniformly over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundTraffic {
    pub od_count: usize,
    pub rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub grid: GridSpec,
    pub intersections: IntersectionLayout,
    #[serde(default)]
    pub patterns: Vec<OdPattern>,
    #[serde(default)]
    pub background: Option<BackgroundTraffic>,
    /// Number of slices simulated, starting at the grid's epoch origin.
    pub duration: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSurge {
    pub label: String,
    pub pattern: String,
    pub origin: Cell,
    pub destination: Cell,
    pub start: usize,
    pub end: usize,
    pub trajectory_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedManifest {
    pub seed: u64,
    pub trajectory_count: usize,
    pub record_count: usize,
    pub surges: Vec<PlantedSurge>,
}

impl PlantedManifest {
    /// Label of the surge that produced `trajectory_id`, if any.
    pub fn surge_of(&self, trajectory_id: &str) -> Option<&str> {
        self.surges
            .iter()
            .find(|s| s.trajectory_ids.binary_search_by(|t| t.as_str().cmp(trajectory_id)).is_ok())
            .map(|s| s.label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub intersections: Vec<Intersection>,
    /// Grouped by trajectory id, each group in time order.
    pub records: Vec<RawTrajectoryRecord>,
    pub manifest: PlantedManifest,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.grid.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let in_grid = |c: &Cell| c.row < self.grid.rows && c.col < self.grid.cols;
        for (i, p) in self.all_patterns().iter().enumerate() {
            if !(p.rate >= 0.0 && p.rate.is_finite()) {
                return Err(ScenarioError::Invalid(format!("pattern {i}: rate must be finite and >= 0")));
            }
            if !in_grid(&p.origin) || !in_grid(&p.destination) {
                return Err(ScenarioError::Invalid(format!("pattern {i}: cell outside the grid")));
            }
            if p.end.unwrap_or(self.duration) < p.start {
                return Err(ScenarioError::Invalid(format!("pattern {i}: end before start")));
            }
            if p.repeat.is_some_and(|r| r.every == 0) {
                return Err(ScenarioError::Invalid(format!("pattern {i}: repeat period must be positive")));
            }
        }
        for h in &self.intersections.hotspots {
            if !(h.weight >= 0.0 && h.sigma >= 0.0) {
                return Err(ScenarioError::Invalid("hotspot weight and sigma must be >= 0".into()));
            }
        }
        if self.intersections.uniform_weight < 0.0 {
            return Err(ScenarioError::Invalid("uniform_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Explicit patterns followed by the expanded background traffic.
    pub fn all_patterns(&self) -> Vec<OdPattern> {
        let mut out = self.patterns.clone();
        if let Some(bg) = &self.background {
            let mut rng = ChaCha8Rng::seed_from_u64(bg.seed);
            let (rows, cols) = (self.grid.rows, self.grid.cols);
            for i in 0..bg.od_count {
                let origin = Cell::new(rng.random_range(0..rows), rng.random_range(0..cols));
                let destination = Cell::new(rng.random_range(0..rows), rng.random_range(0..cols));
                let policy = if rng.random_bool(0.5) {
                    PathPolicy::RowFirst
                } else {
                    PathPolicy::ColumnFirst
                };
                out.push(OdPattern {
                    name: Some(format!("bg{i:03}")),
                    origin,
                    destination,
                    rate: bg.rate,
                    policy,
                    start: 0,
                    end: None,
                    repeat: None,
                    planted: None,
                });
            }
        }
        out
    }
}

/// Cells visited walking from `origin` to `destination`, both included.
/// `Mixed` walks columns first; the per-trajectory draw happens in the generator.
pub fn l_path(origin: Cell, destination: Cell, policy: PathPolicy) -> Vec<Cell> {
    fn step(a: usize, b: usize) -> usize {
        if a < b {
            a + 1
        } else {
            a - 1
        }
    }
    let mut path = vec![origin];
    let mut cur = origin;
    let walk_rows = |cur: &mut Cell, path: &mut Vec<Cell>| {
        while cur.row != destination.row {
            cur.row = step(cur.row, destination.row);
            path.push(*cur);
        }
    };
    let walk_cols = |cur: &mut Cell, path: &mut Vec<Cell>| {
        while cur.col != destination.col {
            cur.col = step(cur.col, destination.col);
            path.push(*cur);
        }
    };
    match policy {
        PathPolicy::RowFirst => {
            walk_rows(&mut cur, &mut path);
            walk_cols(&mut cur, &mut path);
        }
        PathPolicy::ColumnFirst | PathPolicy::Mixed => {
            walk_cols(&mut cur, &mut path);
            walk_rows(&mut cur, &mut path);
        }
    }
    path
}

fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ c.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn place_intersections(layout: &IntersectionLayout, grid: &GridSpec) -> Vec<Intersection> {
    let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);
    let total_weight = layout.uniform_weight + layout.hotspots.iter().map(|h| h.weight).sum::<f64>();
    let uniform = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(grid.lon_min..=grid.lon_max),
            rng.random_range(grid.lat_min..=grid.lat_max),
        ]
    };
    (0..layout.count)
        .map(|i| {
            let mut pick = rng.random_range(0.0..total_weight.max(f64::MIN_POSITIVE));
            let hotspot = layout.hotspots.iter().find(|h| {
                if pick < h.weight {
                    true
                } else {
                    pick -= h.weight;
                    false
                }
            });
            let [lon, lat] = match hotspot {
                Some(h) if h.sigma > 0.0 => {
                    let n = Normal::new(0.0, h.sigma).expect("sigma checked");
                    [
                        (h.lon + n.sample(&mut rng)).clamp(grid.lon_min, grid.lon_max),
                        (h.lat + n.sample(&mut rng)).clamp(grid.lat_min, grid.lat_max),
                    ]
                }
                Some(h) => [h.lon.clamp(grid.lon_min, grid.lon_max), h.lat.clamp(grid.lat_min, grid.lat_max)],
                None => uniform(&mut rng),
            };
            Intersection::new(format!("x{i:04}"), lon, lat)
        })
        .collect()
}

fn pattern_name(p: &OdPattern, i: usize) -> String {
    p.name.clone().unwrap_or_else(|| format!("od{i:03}"))
}

/// One OD stream: Poisson departures per active slice, one point per visited
/// cell, evenly spaced inside the departure slice.
fn realize(scenario: &Scenario, i: usize, p: &OdPattern) -> Vec<(String, Vec<RawTrajectoryRecord>)> {
    let grid = &scenario.grid;
    let name = pattern_name(p, i);
    let mut counts = ChaCha8Rng::seed_from_u64(mix(scenario.seed, i as u64, 0, 0));
    let poisson = (p.rate > 0.0).then(|| Poisson::new(p.rate).expect("rate checked"));
    let (w, h) = (grid.cell_width(), grid.cell_height());
    let mut out = Vec::new();
    for s in (0..scenario.duration).filter(|&s| p.is_active(s, scenario.duration)) {
        let n = poisson.as_ref().map_or(0, |d| d.sample(&mut counts) as usize);
        let t0 = grid.slice_start(s as i64);
        for j in 0..n {
            let id = format!("{name}-{s:05}-{j:03}");
            let mut rng = ChaCha8Rng::seed_from_u64(mix(scenario.seed, i as u64 + 1, s as u64 + 1, j as u64 + 1));
            let policy = match p.policy {
                PathPolicy::Mixed if rng.random_bool(0.5) => PathPolicy::RowFirst,
                PathPolicy::Mixed => PathPolicy::ColumnFirst,
                fixed => fixed,
            };
            let path = l_path(p.origin, p.destination, policy);
            let records = path
                .iter()
                .enumerate()
                .map(|(m, &cell)| {
                    let (cx, cy) = grid.cell_center(cell);
                    RawTrajectoryRecord {
                        trajectory_id: id.clone(),
                        timestamp: t0 + (m as f64 + 0.5) * grid.slice_seconds / path.len() as f64,
                        lon: cx + rng.random_range(-0.3..=0.3) * w,
                        lat: cy + rng.random_range(-0.3..=0.3) * h,
                    }
                })
                .collect();
            out.push((id, records));
        }
    }
    out
}

pub fn generate(scenario: &Scenario) -> Result<SynthOutput, ScenarioError> {
    scenario.validate()?;
    let patterns = scenario.all_patterns();
    let streams: Vec<Vec<(String, Vec<RawTrajectoryRecord>)>> =
        patterns.par_iter().enumerate().map(|(i, p)| realize(scenario, i, p)).collect();

    let surges = patterns
        .iter()
        .zip(&streams)
        .enumerate()
        .filter_map(|(i, (p, stream))| {
            let label = p.planted.clone()?;
            let mut trajectory_ids: Vec<String> = stream.iter().map(|(id, _)| id.clone()).collect();
            trajectory_ids.sort();
            Some(PlantedSurge {
                label,
                pattern: pattern_name(p, i),
                origin: p.origin,
                destination: p.destination,
                start: p.start,
                end: p.end.unwrap_or(scenario.duration).min(scenario.duration),
                trajectory_ids,
            })
        })
        .collect();

    let mut all: Vec<(String, Vec<RawTrajectoryRecord>)> = streams.into_iter().flatten().collect();
    all.sort_by(|a, b| a.0.cmp(&b.0));
    let trajectory_count = all.len();
    let records: Vec<RawTrajectoryRecord> = all.into_iter().flat_map(|(_, r)| r).collect();

    Ok(SynthOutput {
        intersections: place_intersections(&scenario.intersections, &scenario.grid),
        manifest: PlantedManifest {
            seed: scenario.seed,
            trajectory_count,
            record_count: records.len(),
            surges,
        },
        records,
    })
}

/// Centre cell of [`planted_routes_scenario`].
pub const PLANTED_TARGET: Cell = Cell::new(6, 6);

/// A 12x12 grid where five planted routes from the northern edge converge on
/// [`PLANTED_TARGET`] during recurring surge windows, over light background traffic.
///
/// Every 40 slices the routes run for 12; the scenario ends inside the last surge.
pub fn planted_routes_scenario(seed: u64) -> Scenario {
    let grid = GridSpec::new([0.0, 0.0, 0.12, 0.12], 12, 12, 600.0, 0.0).expect("static grid");
    let duration = 222;
    let patterns = [4usize, 5, 6, 7, 8]
        .iter()
        .enumerate()
        .map(|(r, &col)| OdPattern {
            name: Some(format!("route{r}")),
            origin: Cell::new(11, col),
            destination: PLANTED_TARGET,
            rate: 0.8,
            policy: PathPolicy::RowFirst,
            start: 12,
            end: None,
            repeat: Some(Repeat { every: 40, active: 12 }),
            planted: Some(format!("north-route-{r}")),
        })
        .collect();
    Scenario {
        grid,
        intersections: IntersectionLayout {
            count: 200,
            seed,
            hotspots: vec![Hotspot {
                lon: 0.06,
                lat: 0.06,
                sigma: 0.015,
                weight: 2.0,
            }],
            uniform_weight: 1.0,
        },
        patterns,
        background: Some(BackgroundTraffic {
            od_count: 40,
            rate: 0.1,
            seed: seed ^ 0xB6,
        }),
        duration,
        seed,
    }
}
