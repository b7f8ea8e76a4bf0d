//! Strategies: clusters of standardized activation traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest, silhouette, KMeansParams};

pub const MAX_STRATEGIES: usize = 12;
pub const STD_FLOOR: f64 = 1e-9;
pub const DEFAULT_MISMATCH_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMode {
    Fixed(usize),
    /// Pick K in 2..=12 by mean silhouette, smaller K on ties.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOptions {
    pub seed: u64,
    pub restarts: usize,
    /// Disable to cluster raw trace coordinates.
    pub standardize: bool,
}

impl Default for StrategyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            restarts: 10,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyModel {
    pub k: usize,
    pub mean: Vec<f64>,
    /// Per-dimension scale, floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
    /// Centroids in standardized space.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Mean silhouette of the chosen K (auto mode only).
    pub silhouette: Option<f64>,
    /// Set when every trace was identical in auto mode.
    pub degenerate: bool,
}

impl StrategyModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, trace: &[f64]) -> Vec<f64> {
        trace
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Centroid mapped back into raw trace coordinates.
    pub fn raw_centroid(&self, id: usize) -> Vec<f64> {
        self.centroids[id]
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(c, (m, s))| c * s + m)
            .collect()
    }

    /// Nearest centroid (lowest id on ties) and the Euclidean distance to it
    /// in standardized space.
    pub fn assign(&self, trace: &[f64]) -> Result<(usize, f64)> {
        if trace.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "trace length {} does not match model dimension {}",
                trace.len(),
                self.dim()
            )));
        }
        let (id, d2) = nearest(&self.centroids, &self.standardize(trace));
        Ok((id, d2.sqrt()))
    }
}

pub fn fit_strategies<T: AsRef<[f64]>>(
    traces: &[T],
    mode: KMode,
    options: &StrategyOptions,
) -> Result<StrategyModel> {
    let dim = traces
        .first()
        .map(|t| t.as_ref().len())
        .ok_or_else(|| Error::InvalidInput("no traces to cluster".into()))?;
    if traces.iter().any(|t| t.as_ref().len() != dim) {
        return Err(Error::InvalidInput("trace lengths differ".into()));
    }
    let n = traces.len() as f64;
    let (mean, std) = if options.standardize {
        let mean: Vec<f64> = (0..dim)
            .map(|j| traces.iter().map(|t| t.as_ref()[j]).sum::<f64>() / n)
            .collect();
        let std = (0..dim)
            .map(|j| {
                let var = traces
                    .iter()
                    .map(|t| (t.as_ref()[j] - mean[j]).powi(2))
                    .sum::<f64>()
                    / n;
                var.sqrt().max(STD_FLOOR)
            })
            .collect();
        (mean, std)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let points: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| {
            t.as_ref()
                .iter()
                .zip(mean.iter().zip(&std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
        .collect();
    let params = |k| KMeansParams::new(k, options.seed).with_restarts(options.restarts);

    let build = |fit: crate::kmeans::KMeansFit, silhouette, degenerate| StrategyModel {
        k: fit.centroids.len(),
        mean: mean.clone(),
        std: std.clone(),
        centroids: fit.centroids,
        assignments: fit.assignments,
        silhouette,
        degenerate,
    };

    match mode {
        KMode::Fixed(k) => {
            if !(1..=MAX_STRATEGIES).contains(&k) {
                return Err(Error::InvalidArgument(format!(
                    "K must be in 1..={MAX_STRATEGIES}, got {k}"
                )));
            }
            Ok(build(kmeans(&points, &params(k))?, None, false))
        }
        KMode::Auto => {
            if points.iter().all(|p| p == &points[0]) {
                log::warn!("all traces identical; falling back to a single strategy");
                return Ok(build(kmeans(&points, &params(1))?, None, true));
            }
            let mut best: Option<(f64, crate::kmeans::KMeansFit)> = None;
            for k in 2..=MAX_STRATEGIES.min(points.len()) {
                let fit = kmeans(&points, &params(k))?;
                let score = silhouette(&points, &fit.assignments, k);
                log::debug!("auto K: k={k} silhouette={score:.4}");
                if best.as_ref().is_none_or(|(s, _)| score > *s) {
                    best = Some((score, fit));
                }
            }
            match best {
                Some((score, fit)) => Ok(build(fit, Some(score), false)),
                None => Err(Error::InvalidInput("auto K needs at least 2 traces".into())),
            }
        }
    }
}

/// Strategy-by-condition contingency table with row-normalized frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityTable<L> {
    pub levels: Vec<L>,
    /// `counts[strategy][level]`
    pub counts: Vec<Vec<usize>>,
    pub frequencies: Vec<Vec<f64>>,
}

impl<L: Clone + Ord> AffinityTable<L> {
    pub fn frequency(&self, strategy: usize, level: &L) -> Option<f64> {
        let j = self.levels.iter().position(|l| l == level)?;
        self.frequencies.get(strategy).map(|row| row[j])
    }

    pub fn row_total(&self, strategy: usize) -> usize {
        self.counts[strategy].iter().sum()
    }
}

pub fn condition_affinity<L: Clone + Ord>(
    assignments: &[usize],
    tags: &[L],
    k: usize,
) -> Result<AffinityTable<L>> {
    if assignments.is_empty() {
        return Err(Error::InvalidInput("empty assignment list".into()));
    }
    if assignments.len() != tags.len() {
        return Err(Error::InvalidInput(format!(
            "{} assignments but {} tags",
            assignments.len(),
            tags.len()
        )));
    }
    if let Some(bad) = assignments.iter().find(|a| **a >= k) {
        return Err(Error::InvalidInput(format!("strategy id {bad} >= K={k}")));
    }
    let levels: Vec<L> = tags
        .iter()
        .cloned()
        .map(|t| (t, ()))
        .collect::<BTreeMap<_, _>>()
        .into_keys()
        .collect();
    let mut counts = vec![vec![0usize; levels.len()]; k];
    for (a, t) in assignments.iter().zip(tags) {
        let j = levels.binary_search(t).expect("level collected above");
        counts[*a][j] += 1;
    }
    let frequencies = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|c| if total > 0 { *c as f64 / total as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(AffinityTable {
        levels,
        counts,
        frequencies,
    })
}

/// True when the observed strategy carries less than `mass_threshold` of
/// the expected strategy distribution.
pub fn strategy_mismatch(expected: &[f64], observed: usize, mass_threshold: f64) -> Result<bool> {
    let mass = expected.get(observed).ok_or_else(|| {
        Error::InvalidInput(format!(
            "observed strategy {observed} outside distribution of {} strategies",
            expected.len()
        ))
    })?;
    Ok(*mass < mass_threshold)
}
