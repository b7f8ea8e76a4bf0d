//! Lloyd's k-means with k-means++ seeding and seeded restarts.
//!
//! Shared by strategy extraction, the visual codebook and the performance
//! predictor's condition cells.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, mix, Stream};
use crate::stats::squared_distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ seedings; the lowest final objective wins.
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: 100,
            tol: 1e-6,
            restarts: 10,
            seed,
        }
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    /// Nearest final centroid of every point.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after the seeding assignment and after every Lloyd step of
    /// the winning restart.
    pub objective_history: Vec<f64>,
}

/// Nearest centroid by Euclidean distance, lowest index on ties. Returns the
/// index and the squared distance.
pub fn nearest<C: AsRef<[f64]>>(centroids: &[C], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(c.as_ref(), point);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_points<P: AsRef<[f64]>>(points: &[P]) -> Result<usize> {
    let dim = points
        .first()
        .map(|p| p.as_ref().len())
        .ok_or_else(|| Error::InvalidInput("no points to cluster".into()))?;
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::InvalidInput(format!(
                "point {i} has dimension {}, expected {dim}",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("point {i} is not finite")));
        }
    }
    Ok(dim)
}

pub fn kmeans<P: AsRef<[f64]> + Sync>(points: &[P], params: &KMeansParams) -> Result<KMeansFit> {
    check_points(points)?;
    if params.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if points.len() < params.k {
        return Err(Error::InvalidInput(format!(
            "{} points cannot form {} clusters",
            points.len(),
            params.k
        )));
    }
    let mut best: Option<KMeansFit> = None;
    for restart in 0..params.restarts.max(1) {
        let fit = lloyd(points, params, mix(params.seed, restart as u64));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_seed<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::rng(seed, Stream::Cluster);
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // Fewer distinct points than clusters: duplicates are allowed.
            rng.random_range(0..n)
        };
        let c = points[next].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign<P: AsRef<[f64]> + Sync>(points: &[P], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let pairs: Vec<(usize, f64)> = points
        .par_iter()
        .map(|p| nearest(centroids, p.as_ref()))
        .collect();
    let objective = pairs.iter().map(|(_, d)| d).sum();
    (pairs.into_iter().map(|(i, _)| i).collect(), objective)
}

fn lloyd<P: AsRef<[f64]> + Sync>(points: &[P], params: &KMeansParams, seed: u64) -> KMeansFit {
    let dim = points[0].as_ref().len();
    let mut centroids = plus_plus_seed(points, params.k, seed);
    let (mut assignments, mut objective) = assign(points, &centroids);
    let mut history = vec![objective];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; params.k];
        let mut counts = vec![0usize; params.k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        for (c, (sum, count)) in centroids.iter_mut().zip(sums.into_iter().zip(counts)) {
            // Empty clusters keep their previous centroid.
            if count == 0 {
                continue;
            }
            let updated: Vec<f64> = sum.into_iter().map(|s| s / count as f64).collect();
            movement = movement.max(squared_distance(c, &updated).sqrt());
            *c = updated;
        }
        (assignments, objective) = assign(points, &centroids);
        history.push(objective);
        if movement < params.tol {
            converged = true;
            break;
        }
    }
    KMeansFit {
        centroids,
        assignments,
        inertia: objective,
        iterations,
        converged,
        objective_history: history,
    }
}

/// Mean silhouette coefficient. Points in singleton clusters score 0.
pub fn silhouette<P: AsRef<[f64]> + Sync>(points: &[P], assignments: &[usize], k: usize) -> f64 {
    let n = points.len();
    if n < 2 || k < 2 {
        return 0.0;
    }
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            let pi = points[i].as_ref();
            for (j, p) in points.iter().enumerate() {
                if j != i {
                    sums[assignments[j]] += squared_distance(pi, p.as_ref()).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .sum();
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_points() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]]
    }

    #[test]
    fn separates_two_pairs() {
        let fit = kmeans(&four_points(), &KMeansParams::new(2, 1)).unwrap();
        assert_eq!(fit.assignments[0], fit.assignments[1]);
        assert_eq!(fit.assignments[2], fit.assignments[3]);
        assert_ne!(fit.assignments[0], fit.assignments[2]);
        assert!((fit.inertia - 1.0).abs() < 1e-12);
        assert!(fit.converged);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let fit = kmeans(&four_points(), &KMeansParams::new(1, 5)).unwrap();
        assert_eq!(fit.centroids, vec![vec![5.0, 0.5]]);
        assert!(fit.assignments.iter().all(|a| *a == 0));
    }

    #[test]
    fn objective_never_increases() {
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.37;
                vec![t.sin() * 3.0 + (i % 3) as f64 * 4.0, t.cos() * 2.0]
            })
            .collect();
        for seed in 0..5 {
            let fit = kmeans(&pts, &KMeansParams::new(6, seed).with_restarts(1)).unwrap();
            for w in fit.objective_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.objective_history);
            }
        }
    }

    #[test]
    fn more_clusters_than_distinct_points() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let fit = kmeans(&pts, &KMeansParams::new(3, 0)).unwrap();
        assert_eq!(fit.centroids.len(), 3);
        assert!(fit.assignments.iter().all(|a| *a == 0));
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn errors() {
        assert!(kmeans(&four_points(), &KMeansParams::new(5, 0)).is_err());
        assert!(kmeans(&four_points(), &KMeansParams::new(0, 0)).is_err());
        let ragged = vec![vec![0.0], vec![0.0, 1.0]];
        assert!(kmeans(&ragged, &KMeansParams::new(1, 0)).is_err());
        let empty: Vec<Vec<f64>> = vec![];
        assert!(kmeans(&empty, &KMeansParams::new(1, 0)).is_err());
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let c = vec![vec![0.0], vec![2.0], vec![2.0]];
        assert_eq!(nearest(&c, &[1.0]).0, 0);
        assert_eq!(nearest(&c, &[3.0]).0, 1);
    }

    #[test]
    fn silhouette_of_clean_pairs() {
        let pts = four_points();
        let s = silhouette(&pts, &[0, 0, 1, 1], 2);
        // a = 1, b = (10 + sqrt(101)) / 2 for every point.
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        assert!((s - (b - 1.0) / b).abs() < 1e-12);
        assert_eq!(silhouette(&pts, &[0, 0, 0, 0], 1), 0.0);
    }
}
