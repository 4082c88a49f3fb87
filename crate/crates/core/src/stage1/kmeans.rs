//! Deterministic k-means: k-means++ seeding followed by Lloyd iterations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

pub const MAX_ITERATIONS: usize = 100;
/// Independent k-means++ restarts; the lowest-SSE run is kept.
pub const N_INIT: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Within-cluster sum of squared distances.
    pub sse: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the centroid nearest to `x` (ties to the lowest index).
pub fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::stream(seed, &[0x6b6d]);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Clusters `points` into `k` groups, keeping the best of [`N_INIT`]
/// seeded runs (ties to the earliest).
///
/// A cluster left empty by an update is re-seeded with the point farthest
/// from its current centroid (ties to the lowest index). Iteration stops at
/// an assignment fixpoint or after [`MAX_ITERATIONS`] updates.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::InvalidInput("k-means needs k >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidCount {
            requested: k,
            available: points.len(),
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch("k-means points differ in dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "kmeans" });
    }
    let mut best = lloyd(points, k, seed);
    for r in 1..N_INIT {
        let run = lloyd(points, k, seed::derive(seed, &[r as u64]));
        if run.sse < best.sse {
            best = run;
        }
    }
    Ok(best)
}

fn lloyd(points: &[Vec<f64>], k: usize, seed: u64) -> KMeans {
    let dim = points[0].len();
    let mut centroids = seed_plus_plus(points, k, seed);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; points.len()];
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .map(|i| (i, dist2(&points[i], &centroids[assignment[i]])))
                    .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                        Some((_, bd)) if bd >= d => best,
                        _ => Some((i, d)),
                    })
                    .map_or(0, |(i, _)| i);
                taken[far] = true;
                centroids[j] = points[far].clone();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }

    let sse = points.iter().zip(&assignment).map(|(p, &a)| dist2(p, &centroids[a])).sum();
    KMeans {
        centroids,
        assignment,
        iterations,
        sse,
    }
}
