//! k-means over min-max-scaled points with distance-weighted seeding.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{LearnError, Scaler};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClusterModel<T> {
    pub k: usize,
    /// Centroids in scaled coordinates.
    pub centroids: Vec<Vec<T>>,
    pub assignments: Vec<usize>,
    pub inertia: T,
    pub scaler: Scaler<T>,
    /// Inertia after every assignment step, then after the final update.
    pub inertia_trace: Vec<T>,
    pub iterations: usize,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid; ties go to the lower index.
pub fn nearest<T: Scalar>(centroids: &[Vec<T>], p: &[T]) -> usize {
    let mut best = 0;
    let mut best_d = sq_dist(&centroids[0], p);
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(centroid, p);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn inertia<T: Scalar>(points: &[Vec<T>], centroids: &[Vec<T>], assignments: &[usize]) -> T {
    points.iter().zip(assignments).map(|(p, &c)| sq_dist(p, &centroids[c])).sum()
}

fn seed_centroids<T: Scalar>(points: &[Vec<T>], k: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = stream_rng(seed, Stream::ClusterInit);
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]]).as_f64()).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && target < acc {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the target past the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]).as_f64());
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Gives every empty cluster the point farthest from its centroid in the
/// currently largest cluster.
fn repair_empty<T: Scalar>(points: &[Vec<T>], centroids: &mut [Vec<T>], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |b, c| if sizes[c] > sizes[b] { c } else { b });
        if sizes[largest] < 2 {
            return;
        }
        let mut far = None;
        let mut far_d = T::neg_infinity();
        for (i, p) in points.iter().enumerate() {
            if assignments[i] == largest {
                let d = sq_dist(p, &centroids[largest]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let i = far.expect("largest cluster is non-empty");
        assignments[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

fn update<T: Scalar>(points: &[Vec<T>], centroids: &mut [Vec<T>], assignments: &[usize]) {
    let dim = points[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![T::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, &v) in sums[a].iter_mut().zip(p) {
            *s = *s + v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = T::of_usize(counts[c]);
            centroids[c] = sums[c].iter().map(|&s| s / n).collect();
        }
    }
}

/// Runs Lloyd's algorithm on already-scaled points.
pub fn lloyd<T: Scalar>(points: &[Vec<T>], mut centroids: Vec<Vec<T>>) -> (Vec<Vec<T>>, Vec<usize>, Vec<T>, usize) {
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
        repair_empty(points, &mut centroids, &mut next);
        trace.push(inertia(points, &centroids, &next));
        let settled = next == assignments;
        assignments = next;
        update(points, &mut centroids, &assignments);
        if settled {
            break;
        }
    }
    trace.push(inertia(points, &centroids, &assignments));
    (centroids, assignments, trace, iterations)
}

/// Clusters raw rows into `k` groups in min-max-scaled space.
pub fn fit_clusters<T: Scalar>(rows: &[Vec<T>], k: usize, seed: u64) -> Result<ClusterModel<T>, LearnError> {
    if k == 0 || rows.len() < k {
        return Err(LearnError::TooFewRows { rows: rows.len(), needed: k.max(1) });
    }
    let scaler = Scaler::fit(rows)?;
    let points: Vec<Vec<T>> = rows.iter().map(|r| scaler.transform(r)).collect::<Result<_, _>>()?;
    let init = seed_centroids(&points, k, seed);
    let (centroids, assignments, inertia_trace, iterations) = lloyd(&points, init);
    let inertia = *inertia_trace.last().unwrap();
    Ok(ClusterModel { k, centroids, assignments, inertia, scaler, inertia_trace, iterations })
}

impl<T: Scalar> ClusterModel<T> {
    pub fn dim(&self) -> usize {
        self.scaler.dim()
    }

    /// Cluster of a raw (unscaled) row.
    pub fn assign(&self, raw: &[T]) -> Result<usize, LearnError> {
        let scaled = self.scaler.transform(raw)?;
        Ok(nearest(&self.centroids, &scaled))
    }

    /// Centroid of cluster `c` in raw units.
    pub fn centroid_raw(&self, c: usize) -> Result<Vec<T>, LearnError> {
        let centroid =
            self.centroids.get(c).ok_or_else(|| LearnError::ModelMismatch(format!("cluster {c} of {}", self.k)))?;
        self.scaler.inverse_transform(centroid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let rows: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 6.0]];
        let cm = fit_clusters(&rows, 1, 1).unwrap();
        let c = cm.centroid_raw(0).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12);
        // Total scaled variance times n.
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| cm.scaler.transform(r).unwrap()).collect();
        let mean = [0.5, 1.0 / 3.0];
        let tv: f64 = scaled.iter().map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2)).sum();
        assert!((cm.inertia - tv).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_per_point_has_zero_inertia() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let cm = fit_clusters(&rows, 6, 3).unwrap();
        assert_eq!(cm.inertia, 0.0);
        let mut seen = cm.assignments.clone();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_rows() {
        let rows = vec![vec![1.0], vec![2.0]];
        assert!(matches!(fit_clusters(&rows, 3, 0), Err(LearnError::TooFewRows { .. })));
        assert!(matches!(fit_clusters(&rows, 0, 0), Err(LearnError::TooFewRows { .. })));
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let rows = vec![vec![1.0, 1.0]; 5];
        let cm = fit_clusters(&rows, 3, 0).unwrap();
        for c in 0..3 {
            assert!(cm.assignments.contains(&c));
        }
    }

    #[test]
    fn centroid_lookup_and_ties() {
        let rows = vec![vec![0.0], vec![10.0]];
        let cm = fit_clusters(&rows, 2, 0).unwrap();
        let c0 = cm.centroid_raw(cm.assignments[0]).unwrap();
        assert_eq!(cm.assign(&c0).unwrap(), cm.assignments[0]);
        // 5.0 is equidistant; the lower index wins.
        assert_eq!(cm.assign(&[5.0]).unwrap(), 0);
        assert!(cm.centroid_raw(9).is_err());
    }
}
