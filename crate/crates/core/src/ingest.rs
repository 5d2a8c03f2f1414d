//! Raw trajectory parsing, grid snapping and time slicing.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("line {line}: malformed field \"{field}\": {reason}")]
    Malformed {
        line: u64,
        field: &'static str,
        reason: String,
    },
    #[error("csv error: {0}")]
    Csv(String),
    #[error("trajectory {0} fully outside grid")]
    OutsideGrid(String),
    #[error("trajectory {0} has no samples")]
    Empty(String),
}

/// Rectangular lon/lat grid of `rows x cols` cells plus the time slicing rule.
///
/// Row 0 sits at `lat_min`, column 0 at `lon_min`. Cells are half-open except
/// along the top and right edges of the bounding box, which close the last
/// row/column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub rows: usize,
    pub cols: usize,
    pub slice_seconds: f64,
    pub epoch_origin: f64,
}

/// Grid cell as (row, col).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl GridSpec {
    pub const DEFAULT_ROWS: usize = 38;
    pub const DEFAULT_COLS: usize = 36;
    pub const DEFAULT_SLICE_SECONDS: f64 = 600.0;

    pub fn new(
        bbox: [f64; 4],
        rows: usize,
        cols: usize,
        slice_seconds: f64,
        epoch_origin: f64,
    ) -> Result<Self, IngestError> {
        let [lon_min, lat_min, lon_max, lat_max] = bbox;
        let grid = Self {
            lon_min,
            lon_max,
            lat_min,
            lat_max,
            rows,
            cols,
            slice_seconds,
            epoch_origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |s: &str| Err(IngestError::InvalidGrid(s.to_string()));
        if !(self.lon_min.is_finite() && self.lon_max.is_finite()) || self.lon_min >= self.lon_max {
            return bad("lon_min must be < lon_max");
        }
        if !(self.lat_min.is_finite() && self.lat_max.is_finite()) || self.lat_min >= self.lat_max {
            return bad("lat_min must be < lat_max");
        }
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and cols must be >= 1");
        }
        if !(self.slice_seconds.is_finite() && self.slice_seconds > 0.0) {
            return bad("slice_seconds must be > 0");
        }
        if !self.epoch_origin.is_finite() {
            return bad("epoch_origin must be finite");
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_height(&self) -> f64 {
        (self.lat_max - self.lat_min) / self.rows as f64
    }

    pub fn cell_width(&self) -> f64 {
        (self.lon_max - self.lon_min) / self.cols as f64
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max
    }

    /// Cell holding the point, or `None` outside the bounding box.
    pub fn cell_of(&self, lon: f64, lat: f64) -> Option<Cell> {
        if !self.contains(lon, lat) {
            return None;
        }
        let fr = (lat - self.lat_min) / (self.lat_max - self.lat_min) * self.rows as f64;
        let fc = (lon - self.lon_min) / (self.lon_max - self.lon_min) * self.cols as f64;
        let row = (fr.floor() as usize).min(self.rows - 1);
        let col = (fc.floor() as usize).min(self.cols - 1);
        Some(Cell { row, col })
    }

    pub fn slice_of(&self, timestamp: f64) -> i64 {
        ((timestamp - self.epoch_origin) / self.slice_seconds).floor() as i64
    }

    pub fn slice_start(&self, k: i64) -> f64 {
        self.epoch_origin + k as f64 * self.slice_seconds
    }

    /// (lon, lat) of the cell's center.
    pub fn cell_center(&self, cell: Cell) -> (f64, f64) {
        (
            self.lon_min + (cell.col as f64 + 0.5) * self.cell_width(),
            self.lat_min + (cell.row as f64 + 0.5) * self.cell_height(),
        )
    }

    /// `[lon_min, lat_min, lon_max, lat_max]` of one cell.
    pub fn cell_bounds(&self, cell: Cell) -> [f64; 4] {
        let w = self.cell_width();
        let h = self.cell_height();
        [
            self.lon_min + cell.col as f64 * w,
            self.lat_min + cell.row as f64 * h,
            self.lon_min + (cell.col + 1) as f64 * w,
            self.lat_min + (cell.row + 1) as f64 * h,
        ]
    }

    pub fn bbox(&self) -> [f64; 4] {
        [self.lon_min, self.lat_min, self.lon_max, self.lat_max]
    }

    /// Row-major linear index of a cell.
    pub fn linear(&self, cell: Cell) -> usize {
        cell.row * self.cols + cell.col
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| Cell { row, col }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrajectoryRecord {
    pub trajectory_id: String,
    pub timestamp: f64,
    pub lon: f64,
    pub lat: f64,
}

/// Column positions of the four required fields in the input CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub id: usize,
    pub timestamp: usize,
    pub lon: usize,
    pub lat: usize,
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            id: 0,
            timestamp: 1,
            lon: 2,
            lat: 3,
            delimiter: b',',
            has_header: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedTrajectories {
    /// Records per trajectory id, each sorted by timestamp.
    pub trajectories: BTreeMap<String, Vec<RawTrajectoryRecord>>,
    /// Number of dropped rows repeating an earlier (id, timestamp) pair.
    pub duplicate_count: usize,
}

impl ParsedTrajectories {
    pub fn record_count(&self) -> usize {
        self.trajectories.values().map(Vec::len).sum()
    }
}

pub fn parse_trajectories<R: Read>(
    input: R,
    schema: &ColumnMapping,
) -> Result<ParsedTrajectories, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);

    let mut out = ParsedTrajectories::default();
    for (row_no, row) in reader.records().enumerate() {
        let row = row.map_err(|e| IngestError::Csv(e.to_string()))?;
        let line = row
            .position()
            .map(|p| p.line())
            .unwrap_or(row_no as u64 + 1 + schema.has_header as u64);
        if row.iter().all(|f| f.is_empty()) {
            continue;
        }
        let field = |idx: usize, name: &'static str| {
            row.get(idx).ok_or(IngestError::Malformed {
                line,
                field: name,
                reason: "missing column".into(),
            })
        };
        let number = |idx: usize, name: &'static str| -> Result<f64, IngestError> {
            let raw = field(idx, name)?;
            let v: f64 = raw.parse().map_err(|_| IngestError::Malformed {
                line,
                field: name,
                reason: format!("not a number: {raw:?}"),
            })?;
            if !v.is_finite() {
                return Err(IngestError::Malformed {
                    line,
                    field: name,
                    reason: "not finite".into(),
                });
            }
            Ok(v)
        };

        let id = field(schema.id, "id")?;
        if id.is_empty() {
            return Err(IngestError::Malformed {
                line,
                field: "id",
                reason: "empty".into(),
            });
        }
        let record = RawTrajectoryRecord {
            trajectory_id: id.to_string(),
            timestamp: number(schema.timestamp, "timestamp")?,
            lon: number(schema.lon, "lon")?,
            lat: number(schema.lat, "lat")?,
        };
        out.trajectories
            .entry(record.trajectory_id.clone())
            .or_default()
            .push(record);
    }

    for records in out.trajectories.values_mut() {
        // stable sort keeps the first occurrence of a repeated timestamp in front
        records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let before = records.len();
        records.dedup_by(|later, earlier| later.timestamp == earlier.timestamp);
        out.duplicate_count += before - records.len();
    }
    if out.duplicate_count > 0 {
        log::warn!("dropped {} duplicate (id, timestamp) rows", out.duplicate_count);
    }
    Ok(out)
}

/// Writes records as headerless `id,timestamp,lon,lat` rows.
pub fn write_trajectories<W: Write>(output: W, records: &[RawTrajectoryRecord]) -> Result<(), IngestError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(output);
    for r in records {
        w.write_record([
            r.trajectory_id.as_str(),
            &r.timestamp.to_string(),
            &r.lon.to_string(),
            &r.lat.to_string(),
        ])
        .map_err(|e| IngestError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| IngestError::Csv(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub slice: i64,
    pub cell: Cell,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnappedTrajectory {
    pub trajectory_id: String,
    pub grid: GridSpec,
    pub samples: Vec<Sample>,
    /// Points dropped for lying outside the bounding box.
    pub dropped: usize,
}

impl SnappedTrajectory {
    pub fn slices(&self) -> impl Iterator<Item = i64> + '_ {
        let mut last = None;
        self.samples.iter().filter_map(move |s| {
            if last == Some(s.slice) {
                None
            } else {
                last = Some(s.slice);
                Some(s.slice)
            }
        })
    }
}

/// Snaps one trajectory's records (sorted by timestamp) onto the grid.
pub fn snap(records: &[RawTrajectoryRecord], grid: &GridSpec) -> Result<SnappedTrajectory, IngestError> {
    grid.validate()?;
    let id = match records.first() {
        Some(r) => r.trajectory_id.clone(),
        None => return Err(IngestError::Empty(String::new())),
    };
    let mut samples = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        match grid.cell_of(r.lon, r.lat) {
            Some(cell) => samples.push(Sample {
                slice: grid.slice_of(r.timestamp),
                cell,
                timestamp: r.timestamp,
            }),
            None => dropped += 1,
        }
    }
    if samples.is_empty() {
        return Err(IngestError::OutsideGrid(id));
    }
    debug_assert!(samples.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    Ok(SnappedTrajectory {
        trajectory_id: id,
        grid: *grid,
        samples,
        dropped,
    })
}

#[derive(Debug, Clone, Default)]
pub struct SnapSummary {
    pub trajectories: Vec<SnappedTrajectory>,
    /// Ids of trajectories with no in-grid point.
    pub outside: Vec<String>,
    pub dropped_points: usize,
}

/// Snaps every parsed trajectory, skipping (and reporting) those fully outside the grid.
pub fn snap_all(parsed: &ParsedTrajectories, grid: &GridSpec) -> Result<SnapSummary, IngestError> {
    use rayon::prelude::*;
    grid.validate()?;
    let results: Vec<_> = parsed
        .trajectories
        .par_iter()
        .map(|(id, recs)| (id, snap(recs, grid)))
        .collect();
    let mut summary = SnapSummary::default();
    for (id, res) in results {
        match res {
            Ok(t) => {
                summary.dropped_points += t.dropped;
                summary.trajectories.push(t);
            }
            Err(IngestError::OutsideGrid(_)) => {
                summary.dropped_points += parsed.trajectories[id].len();
                summary.outside.push(id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid() -> GridSpec {
        GridSpec::new([0.0, 0.0, 10.0, 10.0], 10, 10, 600.0, 0.0).unwrap()
    }

    #[test]
    fn parses_single_row() {
        let parsed = parse_trajectories("drv1,1477929610,104.07,30.67\n".as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(parsed.duplicate_count, 0);
        assert_eq!(
            parsed.trajectories["drv1"],
            vec![RawTrajectoryRecord {
                trajectory_id: "drv1".into(),
                timestamp: 1477929610.0,
                lon: 104.07,
                lat: 30.67,
            }]
        );
    }

    #[test]
    fn written_rows_parse_back() {
        let records = vec![
            RawTrajectoryRecord {
                trajectory_id: "a".into(),
                timestamp: 12.125,
                lon: 0.1 + 0.2,
                lat: -3.0,
            },
            RawTrajectoryRecord {
                trajectory_id: "a".into(),
                timestamp: 13.0,
                lon: 1e-9,
                lat: 2.5,
            },
        ];
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &records).unwrap();
        let parsed = parse_trajectories(&buf[..], &ColumnMapping::default()).unwrap();
        assert_eq!(parsed.trajectories["a"], records);
    }

    #[test]
    fn empty_stream() {
        let parsed = parse_trajectories("".as_bytes(), &ColumnMapping::default()).unwrap();
        assert!(parsed.trajectories.is_empty());
        assert_eq!(parsed.duplicate_count, 0);
    }

    #[test]
    fn malformed_timestamp_reports_line_and_field() {
        let err = parse_trajectories("drv1,notanumber,104.07,30.67\n".as_bytes(), &ColumnMapping::default()).unwrap_err();
        match err {
            IngestError::Malformed { line, field, .. } => {
                assert_eq!(line, 1);
                assert_eq!(field, "timestamp");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_trajectories("a,1,2,3\na,2,x,3\n".as_bytes(), &ColumnMapping::default()).unwrap_err();
        assert!(matches!(err, IngestError::Malformed { line: 2, field: "lon", .. }));
    }

    #[test]
    fn sorts_and_dedups_within_id() {
        let csv = "a,30,1,1\nb,5,1,1\na,10,2,2\na,30,9,9\na,20,3,3\n";
        let parsed = parse_trajectories(csv.as_bytes(), &ColumnMapping::default()).unwrap();
        let ts: Vec<f64> = parsed.trajectories["a"].iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, vec![10.0, 20.0, 30.0]);
        // first occurrence of (a, 30) wins
        assert_eq!(parsed.trajectories["a"][2].lon, 1.0);
        assert_eq!(parsed.duplicate_count, 1);
        assert_eq!(parsed.record_count(), 4);
    }

    #[test]
    fn custom_schema_with_header_and_delimiter() {
        let csv = "lat;lon;who;when\n30.5;104.1;x;100\n";
        let schema = ColumnMapping {
            id: 2,
            timestamp: 3,
            lon: 1,
            lat: 0,
            delimiter: b';',
            has_header: true,
        };
        let parsed = parse_trajectories(csv.as_bytes(), &schema).unwrap();
        let r = &parsed.trajectories["x"][0];
        assert_eq!((r.timestamp, r.lon, r.lat), (100.0, 104.1, 30.5));
    }

    #[test]
    fn snap_floor_arithmetic() {
        let g = unit_grid();
        assert_eq!(g.cell_of(3.5, 7.2), Some(Cell::new(7, 3)));
        assert_eq!(g.cell_of(3.5, 10.0), Some(Cell::new(9, 3)));
        assert_eq!(g.cell_of(10.0, 10.0), Some(Cell::new(9, 9)));
        assert_eq!(g.cell_of(10.01, 5.0), None);
        assert_eq!(g.slice_of(1530.0), 2);
    }

    #[test]
    fn snap_drops_outside_points() {
        let g = unit_grid();
        let rec = |t: f64, lon: f64, lat: f64| RawTrajectoryRecord {
            trajectory_id: "t".into(),
            timestamp: t,
            lon,
            lat,
        };
        let s = snap(&[rec(0.0, 1.0, 1.0), rec(1.0, -1.0, 1.0), rec(700.0, 2.5, 1.0)], &g).unwrap();
        assert_eq!(s.dropped, 1);
        assert_eq!(s.samples.len(), 2);
        assert_eq!(s.samples[1].slice, 1);
        assert_eq!(s.samples[1].cell, Cell::new(1, 2));

        let err = snap(&[rec(0.0, 11.0, 1.0)], &g).unwrap_err();
        assert_eq!(err, IngestError::OutsideGrid("t".into()));
    }

    #[test]
    fn invalid_grid_rejected() {
        assert!(GridSpec::new([1.0, 0.0, 1.0, 1.0], 1, 1, 1.0, 0.0).is_err());
        assert!(GridSpec::new([0.0, 0.0, 1.0, 1.0], 0, 1, 1.0, 0.0).is_err());
        assert!(GridSpec::new([0.0, 0.0, 1.0, 1.0], 1, 1, 0.0, 0.0).is_err());
    }

    #[test]
    fn snap_all_counts_outside() {
        let csv = "a,0,1,1\na,1,2,2\nb,0,50,50\n";
        let parsed = parse_trajectories(csv.as_bytes(), &ColumnMapping::default()).unwrap();
        let summary = snap_all(&parsed, &unit_grid()).unwrap();
        assert_eq!(summary.trajectories.len(), 1);
        assert_eq!(summary.outside, vec!["b".to_string()]);
        assert_eq!(summary.dropped_points, 1);
        let kept: usize = summary.trajectories.iter().map(|t| t.samples.len()).sum();
        assert_eq!(kept + summary.dropped_points, parsed.record_count());
    }

    proptest! {
        #[test]
        fn point_inside_cell_rect_snaps_to_that_cell(
            rows in 1usize..40, cols in 1usize..40,
            fr in 0.001f64..0.999, fc in 0.001f64..0.999,
            seed_r in 0usize..1000, seed_c in 0usize..1000,
        ) {
            let g = GridSpec::new([104.0, 30.5, 104.2, 30.8], rows, cols, 600.0, 0.0).unwrap();
            let cell = Cell::new(seed_r % rows, seed_c % cols);
            let [x0, y0, x1, y1] = g.cell_bounds(cell);
            let lon = x0 + fc * (x1 - x0);
            let lat = y0 + fr * (y1 - y0);
            prop_assert_eq!(g.cell_of(lon, lat), Some(cell));
            let (cx, cy) = g.cell_center(cell);
            prop_assert_eq!(g.cell_of(cx, cy), Some(cell));
        }

        #[test]
        fn resnapping_centers_is_stable(
            pts in proptest::collection::vec((0.0f64..=10.0, 0.0f64..=10.0), 1..50)
        ) {
            let g = unit_grid();
            let recs: Vec<_> = pts.iter().enumerate().map(|(i, &(lon, lat))| RawTrajectoryRecord {
                trajectory_id: "p".into(), timestamp: i as f64 * 37.0, lon, lat,
            }).collect();
            let snapped = snap(&recs, &g).unwrap();
            let rebuilt: Vec<_> = snapped.samples.iter().map(|s| {
                let (lon, lat) = g.cell_center(s.cell);
                RawTrajectoryRecord { trajectory_id: "p".into(), timestamp: s.timestamp, lon, lat }
            }).collect();
            let again = snap(&rebuilt, &g).unwrap();
            prop_assert_eq!(snapped.samples, again.samples);
        }
    }
}
