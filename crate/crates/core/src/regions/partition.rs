use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::voronoi::{polygon_centroid, voronoi};
use super::{signed_area, Bbox, Clustering, EdgeSide, Intersection, RegionError, Voronoi};
use crate::ingest::{Cell, GridSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPolygon {
    /// Counter-clockwise, not closed.
    pub exterior: Vec<[f64; 2]>,
    /// Clockwise, not closed.
    pub holes: Vec<Vec<[f64; 2]>>,
}

impl RegionPolygon {
    pub fn area(&self) -> f64 {
        signed_area(&self.exterior) + self.holes.iter().map(|h| signed_area(h)).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    /// More than one entry when the union is not a single simple polygon.
    pub polygons: Vec<RegionPolygon>,
    pub intersections: Vec<String>,
    /// Area-weighted centroid of the member cells.
    pub centroid: [f64; 2],
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub bbox: Bbox,
    pub rows: usize,
    pub cols: usize,
    pub regions: Vec<Region>,
    /// Region of each grid cell, row-major.
    pub cell_region: Vec<usize>,
    /// Sorted neighbour ids per region.
    pub adjacency: Vec<Vec<usize>>,
}

impl RegionPartition {
    pub fn region(&self, id: usize) -> Result<&Region, RegionError> {
        self.regions.get(id).ok_or(RegionError::UnknownRegion(id))
    }

    pub fn region_of(&self, cell: Cell) -> usize {
        self.cell_region[cell.row * self.cols + cell.col]
    }

    pub fn cells_of(&self, id: usize) -> Vec<Cell> {
        self.cell_region
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == id)
            .map(|(i, _)| Cell::new(i / self.cols, i % self.cols))
            .collect()
    }

    pub fn neighbors(&self, id: usize) -> &[usize] {
        self.adjacency.get(id).map_or(&[], Vec::as_slice)
    }

    pub fn to_geojson(&self) -> Value {
        let ring = |r: &[[f64; 2]]| {
            let mut v: Vec<Value> = r.iter().map(|p| json!([p[0], p[1]])).collect();
            if let Some(first) = r.first() {
                v.push(json!([first[0], first[1]]));
            }
            Value::Array(v)
        };
        let polygon = |p: &RegionPolygon| {
            let mut rings = vec![ring(&p.exterior)];
            rings.extend(p.holes.iter().map(|h| ring(h)));
            Value::Array(rings)
        };
        let features: Vec<Value> = self
            .regions
            .iter()
            .map(|r| {
                let geometry = if r.polygons.len() == 1 {
                    json!({"type": "Polygon", "coordinates": polygon(&r.polygons[0])})
                } else {
                    json!({"type": "MultiPolygon", "coordinates": r.polygons.iter().map(polygon).collect::<Vec<_>>()})
                };
                json!({
                    "type": "Feature",
                    "geometry": geometry,
                    "properties": {
                        "region_id": r.id,
                        "intersections": r.intersections,
                        "adjacency": self.adjacency[r.id],
                        "centroid": r.centroid,
                        "area": r.area,
                    }
                })
            })
            .collect();
        json!({"type": "FeatureCollection", "features": features})
    }
}

/// Clusters' Voronoi cells dissolved into one partition of `grid`'s bbox.
pub fn partition(intersections: &[Intersection], clustering: &Clustering, grid: &GridSpec) -> Result<RegionPartition, RegionError> {
    let xy: Vec<[f64; 2]> = intersections.iter().map(Intersection::xy).collect();
    let v = voronoi(&xy, Bbox::from_array(grid.bbox()))?;
    merge_regions(&v, intersections, clustering, grid)
}

/// Dissolves Voronoi edges between same-cluster sites.
pub fn merge_regions(
    voronoi: &Voronoi,
    intersections: &[Intersection],
    clustering: &Clustering,
    grid: &GridSpec,
) -> Result<RegionPartition, RegionError> {
    if voronoi.owner.len() != intersections.len() || clustering.assignment.len() != intersections.len() {
        return Err(RegionError::Mismatch(format!(
            "{} generators, {} intersections, {} assignments",
            voronoi.owner.len(),
            intersections.len(),
            clustering.assignment.len()
        )));
    }
    let k = clustering.k;
    let mut site_cluster = vec![usize::MAX; voronoi.sites.len()];
    for (i, &s) in voronoi.owner.iter().enumerate() {
        if site_cluster[s] == usize::MAX {
            site_cluster[s] = clustering.assignment[i];
        }
    }
    let tol = voronoi.bbox.diagonal() * 1e-9;

    let mut adjacency = vec![BTreeSet::new(); k];
    for cell in &voronoi.cells {
        let n = cell.vertices.len();
        for (e, side) in cell.edges.iter().enumerate() {
            if let EdgeSide::Site(j) = *side {
                let (a, b) = (cell.vertices[e], cell.vertices[(e + 1) % n]);
                let (ci, cj) = (site_cluster[cell.site], site_cluster[j]);
                if ci != cj && dist(a, b) > tol {
                    adjacency[ci].insert(cj);
                    adjacency[cj].insert(ci);
                }
            }
        }
    }

    let regions = (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..voronoi.sites.len()).filter(|&s| site_cluster[s] == c).collect();
            let mut boundary = Vec::new();
            let (mut area, mut cx, mut cy) = (0.0, 0.0, 0.0);
            for &s in &members {
                let cell = &voronoi.cells[s];
                let n = cell.vertices.len();
                if n < 3 {
                    continue;
                }
                let a = cell.area();
                let centroid = polygon_centroid(&cell.vertices);
                area += a;
                cx += a * centroid[0];
                cy += a * centroid[1];
                for (e, side) in cell.edges.iter().enumerate() {
                    let keep = match *side {
                        EdgeSide::Bbox => true,
                        EdgeSide::Site(j) => site_cluster[j] != c,
                    };
                    if keep {
                        boundary.push((cell.vertices[e], cell.vertices[(e + 1) % n]));
                    }
                }
            }
            let polygons = assemble(chain_rings(boundary, tol), tol);
            if polygons.len() > 1 {
                log::warn!("region {c} is not a single simple polygon ({} parts)", polygons.len());
            }
            let centroid = if area > 0.0 {
                [cx / area, cy / area]
            } else {
                clustering.centroids[c]
            };
            Region {
                id: c,
                polygons,
                intersections: clustering.members(c).map(|i| intersections[i].id.clone()).collect(),
                centroid,
                area,
            }
        })
        .collect();

    let cell_region = grid
        .cells()
        .map(|cell| {
            let (lon, lat) = grid.cell_center(cell);
            site_cluster[voronoi.locate([lon, lat])]
        })
        .collect();

    Ok(RegionPartition {
        bbox: voronoi.bbox,
        rows: grid.rows,
        cols: grid.cols,
        regions,
        cell_region,
        adjacency: adjacency.into_iter().map(|s| s.into_iter().collect()).collect(),
    })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn turn(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1]];
    let v = [c[0] - b[0], c[1] - b[1]];
    (u[0] * v[1] - u[1] * v[0]).atan2(u[0] * v[0] + u[1] * v[1])
}

/// Links directed boundary edges end to start into closed rings.
fn chain_rings(edges: Vec<([f64; 2], [f64; 2])>, tol: f64) -> Vec<Vec<[f64; 2]>> {
    let edges: Vec<_> = edges.into_iter().filter(|(a, b)| dist(*a, *b) > tol).collect();
    let mut used = vec![false; edges.len()];
    let mut rings = Vec::new();
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let origin = edges[start].0;
        let mut ring = vec![origin];
        let (mut prev, mut cur) = edges[start];
        while dist(cur, origin) > tol {
            // at a pinch point keep the interior on the left by taking the sharpest left turn
            let next = (0..edges.len())
                .filter(|&e| !used[e] && dist(edges[e].0, cur) <= tol)
                .max_by(|&x, &y| turn(prev, cur, edges[x].1).total_cmp(&turn(prev, cur, edges[y].1)));
            let Some(e) = next else {
                break;
            };
            used[e] = true;
            ring.push(cur);
            prev = cur;
            cur = edges[e].1;
        }
        let ring = simplify(ring, tol);
        if ring.len() >= 3 {
            rings.push(ring);
        }
    }
    rings
}

/// Removes vertices lying on the segment between their neighbours.
fn simplify(mut ring: Vec<[f64; 2]>, tol: f64) -> Vec<[f64; 2]> {
    let mut changed = true;
    while changed && ring.len() > 3 {
        changed = false;
        let n = ring.len();
        for i in 0..n {
            let a = ring[(i + n - 1) % n];
            let b = ring[i];
            let c = ring[(i + 1) % n];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let bc = [c[0] - b[0], c[1] - b[1]];
            let cross = ab[0] * bc[1] - ab[1] * bc[0];
            let dot = ab[0] * bc[0] + ab[1] * bc[1];
            if cross.abs() <= tol * dist(a, c) && dot > 0.0 {
                ring.remove(i);
                changed = true;
                break;
            }
        }
    }
    ring
}

fn point_in_ring(p: [f64; 2], ring: &[[f64; 2]]) -> bool {
    let n = ring.len();
    let mut inside = false;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Groups rings into exteriors (counter-clockwise) with their holes.
fn assemble(rings: Vec<Vec<[f64; 2]>>, tol: f64) -> Vec<RegionPolygon> {
    let (outer, holes): (Vec<_>, Vec<_>) = rings.into_iter().partition(|r| signed_area(r) > 0.0);
    let mut polys: Vec<RegionPolygon> = outer
        .into_iter()
        .map(|exterior| RegionPolygon {
            exterior,
            holes: Vec::new(),
        })
        .collect();
    for hole in holes {
        if signed_area(&hole).abs() <= tol * tol {
            continue;
        }
        let probe = polygon_centroid(&hole);
        let host = polys
            .iter()
            .enumerate()
            .filter(|(_, p)| hole.iter().all(|&v| point_in_ring(v, &p.exterior) || on_ring(v, &p.exterior, tol)) && point_in_ring(probe, &p.exterior))
            .min_by(|a, b| signed_area(&a.1.exterior).total_cmp(&signed_area(&b.1.exterior)))
            .map(|(i, _)| i)
            .or_else(|| (0..polys.len()).max_by(|&a, &b| signed_area(&polys[a].exterior).total_cmp(&signed_area(&polys[b].exterior))));
        match host {
            Some(i) => polys[i].holes.push(hole),
            None => log::warn!("dropping hole ring without an exterior"),
        }
    }
    polys
}

fn on_ring(p: [f64; 2], ring: &[[f64; 2]], tol: f64) -> bool {
    let n = ring.len();
    (0..n).any(|i| {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        let len = dist(a, b);
        if len == 0.0 {
            return dist(p, a) <= tol;
        }
        let t = ((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / (len * len);
        let t = t.clamp(0.0, 1.0);
        dist(p, [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]) <= tol
    })
}
