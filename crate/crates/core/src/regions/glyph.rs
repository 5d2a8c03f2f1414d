use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{RegionError, RegionPartition};
use crate::flow::Channel;
use crate::predictor::{GridField, PredictionTensor};

pub const DEFAULT_SECTORS: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SectorSums {
    pub positive_sum: f64,
    /// Magnitude of the negative contributions.
    pub negative_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarGlyphPayload {
    pub region_id: usize,
    pub channel: Channel,
    pub centroid: [f64; 2],
    /// Current value followed by one value per predicted step.
    pub series: Vec<f64>,
    pub selected_horizon: usize,
    /// Sector 0 is centred on north, numbered clockwise.
    pub sectors: Vec<SectorSums>,
    /// Sector each contributing neighbour landed in.
    pub neighbor_sectors: BTreeMap<usize, usize>,
}

impl RadarGlyphPayload {
    pub fn net(&self) -> f64 {
        self.sectors.iter().map(|s| s.positive_sum - s.negative_sum).sum()
    }
}

/// Compass bearing in degrees from `from` to `to`, both `[lon, lat]`,
/// using a local equirectangular projection.
pub fn bearing_deg(from: [f64; 2], to: [f64; 2]) -> f64 {
    let mean_lat = ((from[1] + to[1]) / 2.0).to_radians();
    let dx = (to[0] - from[0]) * mean_lat.cos();
    let dy = to[1] - from[1];
    dx.atan2(dy).to_degrees().rem_euclid(360.0)
}

pub fn sector_of(bearing: f64, sectors: usize) -> usize {
    let width = 360.0 / sectors as f64;
    (((bearing + width / 2.0).rem_euclid(360.0) / width).floor() as usize).min(sectors - 1)
}

/// Region sums of `current` and each predicted frame, plus the directional
/// binning of `neighbor_phi` around the region's centroid.
#[allow(clippy::too_many_arguments)]
pub fn build_glyph(
    partition: &RegionPartition,
    region_id: usize,
    channel: Channel,
    current: &GridField,
    predictions: &[PredictionTensor],
    neighbor_phi: &BTreeMap<usize, f64>,
    selected_horizon: usize,
    sectors: usize,
) -> Result<RadarGlyphPayload, RegionError> {
    let region = partition.region(region_id)?;
    if sectors == 0 {
        return Err(RegionError::Mismatch("sector count must be positive".into()));
    }
    let dims = (partition.rows, partition.cols);
    if current.dims() != dims || predictions.iter().any(|p| p.values.dims() != dims) {
        return Err(RegionError::Mismatch("frame dimensions differ from the partition grid".into()));
    }
    let cells = partition.cells_of(region_id);
    let region_sum = |f: &GridField| cells.iter().map(|&c| f.get(channel, c)).sum::<f64>();
    let mut series = vec![region_sum(current)];
    series.extend(predictions.iter().map(|p| region_sum(&p.values)));

    let mut sums = vec![SectorSums::default(); sectors];
    let mut neighbor_sectors = BTreeMap::new();
    for (&other, &phi) in neighbor_phi {
        if other == region_id {
            continue;
        }
        let neighbor = partition.region(other)?;
        let s = sector_of(bearing_deg(region.centroid, neighbor.centroid), sectors);
        neighbor_sectors.insert(other, s);
        if phi >= 0.0 {
            sums[s].positive_sum += phi;
        } else {
            sums[s].negative_sum -= phi;
        }
    }

    Ok(RadarGlyphPayload {
        region_id,
        channel,
        centroid: region.centroid,
        series,
        selected_horizon,
        sectors: sums,
        neighbor_sectors,
    })
}
