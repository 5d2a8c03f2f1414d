use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{polygon_area, Bbox, RegionError};
use crate::regions::kmeans::dist2;

/// What lies across a cell edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "site")]
pub enum EdgeSide {
    Site(usize),
    Bbox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoronoiCell {
    pub site: usize,
    /// Counter-clockwise, not closed.
    pub vertices: Vec<[f64; 2]>,
    /// `edges[i]` is the edge from `vertices[i]` to `vertices[i + 1]`.
    pub edges: Vec<EdgeSide>,
}

impl VoronoiCell {
    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices)
    }

    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            cross >= -tol * len.max(f64::MIN_POSITIVE)
        })
    }

    pub fn centroid(&self) -> [f64; 2] {
        polygon_centroid(&self.vertices)
    }
}

pub(crate) fn polygon_centroid(v: &[[f64; 2]]) -> [f64; 2] {
    let n = v.len();
    let (mut cx, mut cy, mut a2) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let p = v[i];
        let q = v[(i + 1) % n];
        let cross = p[0] * q[1] - q[0] * p[1];
        a2 += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    if a2.abs() < f64::MIN_POSITIVE {
        let sx: f64 = v.iter().map(|p| p[0]).sum();
        let sy: f64 = v.iter().map(|p| p[1]).sum();
        return [sx / n as f64, sy / n as f64];
    }
    [cx / (3.0 * a2), cy / (3.0 * a2)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voronoi {
    pub bbox: Bbox,
    /// Distinct generator locations.
    pub sites: Vec<[f64; 2]>,
    /// Site index of each input generator; duplicates share a site.
    pub owner: Vec<usize>,
    /// One cell per site.
    pub cells: Vec<VoronoiCell>,
}

impl Voronoi {
    pub fn nearest_site(&self, p: [f64; 2]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &s) in self.sites.iter().enumerate() {
            let d = dist2(p, s);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Site whose clipped cell contains `p`, falling back to the nearest site.
    pub fn locate(&self, p: [f64; 2]) -> usize {
        let tol = self.bbox.diagonal() * 1e-12;
        let guess = self.nearest_site(p);
        if self.cells[guess].contains(p, tol) {
            return guess;
        }
        self.cells.iter().position(|c| c.contains(p, tol)).unwrap_or(guess)
    }
}

/// Clips `poly` to the half-plane of points at least as close to `site` as to `other`.
fn clip(poly: &[[f64; 2]], edges: &[EdgeSide], site: [f64; 2], other: [f64; 2], label: EdgeSide, eps: f64) -> (Vec<[f64; 2]>, Vec<EdgeSide>) {
    let d = [other[0] - site[0], other[1] - site[1]];
    let m = [(other[0] + site[0]) / 2.0, (other[1] + site[1]) / 2.0];
    let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let side = |p: [f64; 2]| ((p[0] - m[0]) * d[0] + (p[1] - m[1]) * d[1]) / norm;

    let n = poly.len();
    let mut out_v = Vec::with_capacity(n + 1);
    let mut out_e = Vec::with_capacity(n + 1);
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let sa = side(a);
        let sb = side(b);
        let a_in = sa <= eps;
        let b_in = sb <= eps;
        if a_in {
            out_v.push(a);
            out_e.push(edges[i]);
        }
        if a_in != b_in {
            let t = sa / (sa - sb);
            let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            out_v.push(x);
            out_e.push(if a_in { label } else { edges[i] });
        }
    }
    dedup_ring(out_v, out_e, eps)
}

/// Drops zero-length edges, keeping the label of the edge that follows.
fn dedup_ring(mut v: Vec<[f64; 2]>, mut e: Vec<EdgeSide>, eps: f64) -> (Vec<[f64; 2]>, Vec<EdgeSide>) {
    let mut i = 0;
    while v.len() > 1 && i < v.len() {
        let j = (i + 1) % v.len();
        if dist2(v[i], v[j]).sqrt() <= eps {
            v.remove(i);
            e.remove(i);
        } else {
            i += 1;
        }
    }
    (v, e)
}

/// Voronoi diagram of `generators`, each cell clipped to `bbox`.
pub fn voronoi(generators: &[[f64; 2]], bbox: Bbox) -> Result<Voronoi, RegionError> {
    if generators.is_empty() {
        return Err(RegionError::NoGenerators);
    }
    if generators.iter().any(|g| !(g[0].is_finite() && g[1].is_finite())) {
        return Err(RegionError::NonFinite("generator".into()));
    }

    let mut sites: Vec<[f64; 2]> = Vec::new();
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    let owner = generators
        .iter()
        .map(|g| {
            *seen.entry((g[0].to_bits(), g[1].to_bits())).or_insert_with(|| {
                sites.push(*g);
                sites.len() - 1
            })
        })
        .collect();

    let eps = bbox.diagonal() * 1e-12;
    let corners = bbox.corners();
    let cells = sites
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut verts = corners.to_vec();
            let mut edges = vec![EdgeSide::Bbox; 4];
            let mut others: Vec<(f64, usize)> = sites.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, &o)| (dist2(s, o), j)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (d2, j) in others {
                let reach = verts.iter().map(|&v| dist2(v, s)).fold(0.0f64, f64::max);
                // a site farther than twice the cell's reach cannot cut it
                if d2 > 4.0 * reach * (1.0 + 1e-9) {
                    break;
                }
                let (v, e) = clip(&verts, &edges, s, sites[j], EdgeSide::Site(j), eps);
                verts = v;
                edges = e;
                if verts.len() < 3 {
                    break;
                }
            }
            VoronoiCell {
                site: i,
                vertices: verts,
                edges,
            }
        })
        .collect();

    Ok(Voronoi { bbox, sites, owner, cells })
}
