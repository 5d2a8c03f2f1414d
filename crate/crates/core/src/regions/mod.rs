//! Intersection-balanced regions: k-means over intersections, a clipped
//! Voronoi tessellation, the merged per-cluster partition and radar glyphs.

mod glyph;
mod kmeans;
mod partition;
mod voronoi;

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use glyph::{bearing_deg, build_glyph, sector_of, RadarGlyphPayload, SectorSums, DEFAULT_SECTORS};
pub use kmeans::{kmeans, Clustering, MAX_ITERATIONS};
pub use partition::{merge_regions, partition, Region, RegionPartition, RegionPolygon};
pub use voronoi::{voronoi, EdgeSide, Voronoi, VoronoiCell};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegionError {
    #[error("invalid cluster count: {0}")]
    InvalidK(String),
    #[error("non-finite coordinate for {0}")]
    NonFinite(String),
    #[error("no generators")]
    NoGenerators,
    #[error("unknown region {0}")]
    UnknownRegion(usize),
    #[error("input mismatch: {0}")]
    Mismatch(String),
    #[error("intersections file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
}

impl Intersection {
    pub fn new(id: impl Into<String>, lon: f64, lat: f64) -> Self {
        Self { id: id.into(), lon, lat }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.lon, self.lat]
    }
}

/// Reads `id,lon,lat` rows, with or without a header line.
pub fn read_intersections<R: Read>(reader: R) -> Result<Vec<Intersection>, RegionError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| RegionError::Io(e.to_string()))?;
        if i == 0 && row.get(1).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let field = |j: usize| row.get(j).ok_or_else(|| RegionError::Io(format!("line {}: missing column {j}", i + 1)));
        let num = |j: usize| {
            field(j)?
                .parse::<f64>()
                .map_err(|e| RegionError::Io(format!("line {}: column {j}: {e}", i + 1)))
        };
        let p = Intersection::new(field(0)?, num(1)?, num(2)?);
        if !(p.lon.is_finite() && p.lat.is_finite()) {
            return Err(RegionError::NonFinite(p.id));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_intersections<W: Write>(writer: W, points: &[Intersection]) -> Result<(), RegionError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for p in points {
        w.write_record([p.id.clone(), p.lon.to_string(), p.lat.to_string()])
            .map_err(|e| RegionError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| RegionError::Io(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl Bbox {
    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Self {
        Self {
            min_lon,
            min_lat,
            max_lon,
            max_lat,
        }
    }

    /// From `[lon_min, lat_min, lon_max, lat_max]`.
    pub fn from_array(b: [f64; 4]) -> Self {
        Self::new(b[0], b[1], b[2], b[3])
    }

    /// Counter-clockwise from the south-west corner.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        [
            [self.min_lon, self.min_lat],
            [self.max_lon, self.min_lat],
            [self.max_lon, self.max_lat],
            [self.min_lon, self.max_lat],
        ]
    }

    pub fn area(&self) -> f64 {
        (self.max_lon - self.min_lon) * (self.max_lat - self.min_lat)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max_lon - self.min_lon).hypot(self.max_lat - self.min_lat)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min_lon && p[0] <= self.max_lon && p[1] >= self.min_lat && p[1] <= self.max_lat
    }
}

/// Signed shoelace area, positive for counter-clockwise rings.
pub fn signed_area(ring: &[[f64; 2]]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let p = ring[i];
            let q = ring[(i + 1) % n];
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        / 2.0
}

pub fn polygon_area(ring: &[[f64; 2]]) -> f64 {
    signed_area(ring).abs()
}

/// Population variance of per-cluster intersection counts.
pub fn variance_diagnostic(clustering: &Clustering) -> f64 {
    count_variance(&clustering.counts())
}

pub fn count_variance(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    counts.iter().map(|&c| (mean - c as f64).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDiagnostics {
    pub k: usize,
    pub variance: f64,
    pub mean_count: f64,
    pub counts: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
}

/// Clusters once per K in `kmin..=kmax` and reports count variance for each.
pub fn k_sweep(points: &[Intersection], kmin: usize, kmax: usize, seed: u64) -> Result<Vec<KDiagnostics>, RegionError> {
    if kmin == 0 || kmin > kmax {
        return Err(RegionError::InvalidK(format!("bad range {kmin}..={kmax}")));
    }
    (kmin..=kmax)
        .into_par_iter()
        .map(|k| {
            let c = kmeans(points, k, seed)?;
            let counts = c.counts();
            Ok(KDiagnostics {
                k,
                variance: count_variance(&counts),
                mean_count: points.len() as f64 / k as f64,
                inertia: c.inertia(points),
                counts,
            })
        })
        .collect()
}
