use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Intersection, RegionError};

pub const MAX_ITERATIONS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    /// Cluster of each intersection, in input order.
    pub assignment: Vec<usize>,
    /// `[lon, lat]` per cluster.
    pub centroids: Vec<[f64; 2]>,
    pub iterations: usize,
    /// False when the iteration cap stopped Lloyd before assignments settled.
    pub converged: bool,
}

impl Clustering {
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &a in &self.assignment {
            counts[a] += 1;
        }
        counts
    }

    /// Within-cluster sum of squared distances.
    pub fn inertia(&self, points: &[Intersection]) -> f64 {
        points
            .iter()
            .zip(&self.assignment)
            .map(|(p, &a)| dist2(p.xy(), self.centroids[a]))
            .sum()
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a == cluster)
            .map(|(i, _)| i)
    }
}

#[inline]
pub(crate) fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn distinct_count(points: &[[f64; 2]]) -> usize {
    let mut sorted: Vec<[f64; 2]> = points.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    sorted.dedup();
    sorted.len()
}

/// k-means++ seeding, distance-squared weighted.
fn seed_centroids(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => points[dist.sample(rng)],
            // every remaining weight is zero: fall back to the first unused distinct point
            Err(_) => *points.iter().find(|p| !centroids.contains(p)).expect("enough distinct points"),
        };
        centroids.push(next);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, next));
        }
    }
    centroids
}

fn update_centroids(points: &[[f64; 2]], assignment: &mut [usize], k: usize) -> Vec<[f64; 2]> {
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment.iter()) {
        sums[a][0] += p[0];
        sums[a][1] += p[1];
        counts[a] += 1;
    }
    let mut centroids: Vec<[f64; 2]> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { [f64::NAN; 2] } else { [s[0] / n as f64, s[1] / n as f64] })
        .collect();

    // repair: the largest cluster gives up its farthest point to each empty one
    while let Some(empty) = counts.iter().position(|&n| n == 0) {
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        let far = (0..points.len())
            .filter(|&i| assignment[i] == largest)
            .max_by(|&a, &b| {
                dist2(points[a], centroids[largest])
                    .total_cmp(&dist2(points[b], centroids[largest]))
                    .then(b.cmp(&a))
            })
            .unwrap();
        assignment[far] = empty;
        counts[largest] -= 1;
        counts[empty] = 1;
        centroids[empty] = points[far];
        let n = counts[largest] as f64;
        let (sx, sy) = (0..points.len())
            .filter(|&i| assignment[i] == largest)
            .fold((0.0, 0.0), |(x, y), i| (x + points[i][0], y + points[i][1]));
        centroids[largest] = [sx / n, sy / n];
    }
    centroids
}

/// Lloyd's algorithm from a seeded k-means++ start, stopping once no
/// intersection changes cluster (or after [`MAX_ITERATIONS`]).
pub fn kmeans(points: &[Intersection], k: usize, seed: u64) -> Result<Clustering, RegionError> {
    if k == 0 {
        return Err(RegionError::InvalidK("K must be >= 1".into()));
    }
    if let Some(p) = points.iter().find(|p| !(p.lon.is_finite() && p.lat.is_finite())) {
        return Err(RegionError::NonFinite(p.id.clone()));
    }
    let xy: Vec<[f64; 2]> = points.iter().map(Intersection::xy).collect();
    let distinct = distinct_count(&xy);
    if k > distinct {
        return Err(RegionError::InvalidK(format!("K={k} exceeds {distinct} distinct points")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&xy, k, &mut rng);
    let mut assignment: Vec<usize> = xy.iter().map(|&p| nearest(p, &centroids)).collect();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        centroids = update_centroids(&xy, &mut assignment, k);
        let next: Vec<usize> = xy.iter().map(|&p| nearest(p, &centroids)).collect();
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    if !converged {
        centroids = update_centroids(&xy, &mut assignment, k);
    }
    Ok(Clustering {
        k,
        assignment,
        centroids,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::tests::pts;

    #[test]
    fn two_obvious_clusters() {
        let p = pts(&[(0.0, 0.0), (0.0, 1.0), (10.0, 0.0), (10.0, 1.0)]);
        // oracle: minimal within-cluster SSE over every 2-partition
        let xy: Vec<[f64; 2]> = p.iter().map(Intersection::xy).collect();
        let mut best = (f64::INFINITY, 0usize);
        for mask in 1..(1usize << 4) - 1 {
            let sse: f64 = [true, false]
                .iter()
                .map(|&side| {
                    let members: Vec<[f64; 2]> = (0..4).filter(|i| (mask >> i & 1 == 1) == side).map(|i| xy[i]).collect();
                    let n = members.len() as f64;
                    let c = [members.iter().map(|m| m[0]).sum::<f64>() / n, members.iter().map(|m| m[1]).sum::<f64>() / n];
                    members.iter().map(|&m| dist2(m, c)).sum::<f64>()
                })
                .sum();
            if sse < best.0 {
                best = (sse, mask);
            }
        }
        assert!(best.1 == 0b0011 || best.1 == 0b1100);

        for seed in 0..10 {
            let c = kmeans(&p, 2, seed).unwrap();
            assert!(c.converged);
            assert_eq!(c.assignment[0], c.assignment[1]);
            assert_eq!(c.assignment[2], c.assignment[3]);
            assert_ne!(c.assignment[0], c.assignment[2]);
            assert!((c.inertia(&p) - best.0).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let p = pts(&[(0.0, 0.0), (3.0, 1.0), (5.0, 5.0), (1.0, 4.0), (2.0, 2.0)]);
        let c = kmeans(&p, 5, 3).unwrap();
        assert_eq!(c.counts(), vec![1; 5]);
        assert!(c.inertia(&p).abs() < 1e-24);
    }

    #[test]
    fn seeded_determinism() {
        let p = crate::regions::tests::random_points(300, 17);
        let a = kmeans(&p, 9, 4).unwrap();
        let b = kmeans(&p, 9, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_k() {
        let p = pts(&[(0.0, 0.0), (0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(kmeans(&p, 3, 0), Err(RegionError::InvalidK(_))));
        assert!(matches!(kmeans(&p, 0, 0), Err(RegionError::InvalidK(_))));
        assert!(kmeans(&p, 2, 0).is_ok());
    }

    #[test]
    fn converged_assignment_is_nearest_centroid() {
        for seed in 0..5 {
            let p = crate::regions::tests::random_points(200, seed);
            for k in [2, 7, 21] {
                let c = kmeans(&p, k, seed).unwrap();
                assert!(c.converged);
                assert!(c.counts().iter().all(|&n| n > 0));
                for (pt, &a) in p.iter().zip(&c.assignment) {
                    let own = dist2(pt.xy(), c.centroids[a]);
                    for cen in &c.centroids {
                        assert!(dist2(pt.xy(), *cen) >= own - 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_cluster_repair() {
        let mut assignment = vec![0, 0, 0, 0];
        let xy = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [9.0, 0.0]];
        let c = update_centroids(&xy, &mut assignment, 2);
        assert_eq!(assignment, vec![0, 0, 0, 1]);
        assert_eq!(c[1], [9.0, 0.0]);
        assert_eq!(c[0], [1.0, 0.0]);
    }
}
