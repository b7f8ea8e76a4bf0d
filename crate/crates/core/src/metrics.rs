//! Coverage, correctness, fidelity and reliability.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guard::Requirement;
use crate::predictors::{ErrorBand, LogisticParams, SoftmaxRegression};
use crate::rng::{self, mix, Stream};
use crate::scene::{ObstacleKind, SceneParams, TimeOfDay, Weather};
use crate::sim::{EpisodeLog, Outcome};
use crate::stats::{argmax, nearest_rank};

/// Mass comparisons in credible sets tolerate this much rounding.
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectnessMode {
    Point,
    Distribution,
}

/// Smallest prefix of strategies by descending mass (lower id first on
/// ties) whose cumulative mass reaches `credible_mass`.
pub fn credible_set(distribution: &[f64], credible_mass: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distribution.len()).collect();
    order.sort_by(|a, b| distribution[*b].total_cmp(&distribution[*a]).then(a.cmp(b)));
    let mut total = 0.0;
    let mut set = Vec::new();
    for k in order {
        set.push(k);
        total += distribution[k];
        if total >= credible_mass - MASS_TOLERANCE {
            break;
        }
    }
    set
}

pub fn compute_correctness<D: AsRef<[f64]>>(
    predicted: &[D],
    executed: &[usize],
    mode: CorrectnessMode,
    credible_mass: f64,
) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    if predicted.len() != executed.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions but {} executed strategies",
            predicted.len(),
            executed.len()
        )));
    }
    let hits = predicted
        .iter()
        .zip(executed)
        .filter(|(p, e)| match mode {
            CorrectnessMode::Point => argmax(p.as_ref()) == **e,
            CorrectnessMode::Distribution => credible_set(p.as_ref(), credible_mass).contains(e),
        })
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityScore {
    pub fidelity: f64,
    pub brier: f64,
    pub samples: usize,
}

/// Brier score of in-band forecasts; fidelity is its complement.
pub fn brier_fidelity(forecasts: &[f64], outcomes: &[bool]) -> Result<FidelityScore> {
    if forecasts.is_empty() {
        return Err(Error::InvalidInput("no forecasts to score".into()));
    }
    if forecasts.len() != outcomes.len() {
        return Err(Error::InvalidInput("forecast and outcome lengths differ".into()));
    }
    let brier = forecasts
        .iter()
        .zip(outcomes)
        .map(|(p, o)| (p - if *o { 1.0 } else { 0.0 }).powi(2))
        .sum::<f64>()
        / forecasts.len() as f64;
    Ok(FidelityScore {
        fidelity: 1.0 - brier,
        brier,
        samples: forecasts.len(),
    })
}

/// A predicted band, its forecast probability and what actually happened.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRecord {
    pub band: ErrorBand,
    pub in_band_probability: f64,
    pub signed_error: f64,
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
}

impl BandRecord {
    pub fn in_band(&self) -> bool {
        self.band.contains(self.signed_error)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityMode {
    /// Per-sample calibrated probabilities.
    Fine,
    /// One pooled calibration rate per (weather, time of day) group.
    Coarse,
}

/// Scores `records`; coarse mode replaces each forecast by the in-band rate
/// of the calibration records sharing its (weather, time of day) group,
/// falling back to the overall calibration rate for unseen groups.
pub fn compute_fidelity(
    records: &[BandRecord],
    mode: FidelityMode,
    calibration: &[BandRecord],
) -> Result<FidelityScore> {
    let outcomes: Vec<bool> = records.iter().map(BandRecord::in_band).collect();
    let forecasts: Vec<f64> = match mode {
        FidelityMode::Fine => records.iter().map(|r| r.in_band_probability).collect(),
        FidelityMode::Coarse => {
            if calibration.is_empty() {
                return Err(Error::InvalidInput("coarse fidelity needs calibration records".into()));
            }
            let groups = Weather::ALL.len() * TimeOfDay::ALL.len();
            let key = |r: &BandRecord| r.weather.index() * TimeOfDay::ALL.len() + r.time_of_day.index();
            let mut hits = vec![0usize; groups];
            let mut counts = vec![0usize; groups];
            for r in calibration {
                counts[key(r)] += 1;
                hits[key(r)] += usize::from(r.in_band());
            }
            let pooled = hits.iter().sum::<usize>() as f64 / calibration.len() as f64;
            records
                .iter()
                .map(|r| match counts[key(r)] {
                    0 => pooled,
                    n => hits[key(r)] as f64 / n as f64,
                })
                .collect()
        }
    };
    brier_fidelity(&forecasts, &outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityResult {
    pub requirement: String,
    pub required_rate: f64,
    pub episodes: usize,
    pub handed_off: usize,
    pub detected: usize,
    /// `None` when no non-handed-off episode matched.
    pub achieved_rate: Option<f64>,
    pub met: Option<bool>,
}

/// Hand-offs are excluded from the denominator: a deferred decision is
/// neither a detection nor a miss.
pub fn compute_reliability(logs: &[EpisodeLog], requirements: &[Requirement]) -> Vec<ReliabilityResult> {
    requirements
        .iter()
        .map(|req| {
            let matching: Vec<&EpisodeLog> = logs.iter().filter(|l| req.matches(&l.tags)).collect();
            let handed_off = matching.iter().filter(|l| l.outcome == Outcome::HandedOff).count();
            let detected = matching
                .iter()
                .filter(|l| l.outcome == Outcome::DetectedInTime)
                .count();
            let denominator = matching.len() - handed_off;
            let achieved = (denominator > 0).then(|| detected as f64 / denominator as f64);
            ReliabilityResult {
                requirement: req.to_string(),
                required_rate: req.min_rate,
                episodes: matching.len(),
                handed_off,
                detected,
                achieved_rate: achieved,
                met: achieved.map(|a| a >= req.min_rate),
            }
        })
        .collect()
}

/// A ground-truth scene factor as integer levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorColumn {
    pub name: String,
    pub level_names: Vec<String>,
    pub levels: Vec<usize>,
}

/// Weather, time of day, obstacle kind and distance tercile of each
/// sample. Distance terciles use nearest-rank boundaries of the given
/// samples, closed on the left.
pub fn scene_factors(params: &[SceneParams]) -> Vec<FactorColumn> {
    let names = |all: &[&str]| all.iter().map(|s| s.to_string()).collect();
    let distances: Vec<f64> = params.iter().map(|p| p.distance_m).collect();
    let lo = nearest_rank(&distances, 1.0 / 3.0).unwrap_or(0.0);
    let hi = nearest_rank(&distances, 2.0 / 3.0).unwrap_or(0.0);
    vec![
        FactorColumn {
            name: "weather".into(),
            level_names: Weather::ALL.iter().map(|w| w.to_string()).collect(),
            levels: params.iter().map(|p| p.weather.index()).collect(),
        },
        FactorColumn {
            name: "time_of_day".into(),
            level_names: TimeOfDay::ALL.iter().map(|t| t.to_string()).collect(),
            levels: params.iter().map(|p| p.time_of_day.index()).collect(),
        },
        FactorColumn {
            name: "obstacle_kind".into(),
            level_names: ObstacleKind::ALL.iter().map(|o| o.to_string()).collect(),
            levels: params.iter().map(|p| p.obstacle_kind.index()).collect(),
        },
        FactorColumn {
            name: "distance_tercile".into(),
            level_names: names(&["near", "mid", "far"]),
            levels: params
                .iter()
                .map(|p| usize::from(p.distance_m >= lo) + usize::from(p.distance_m >= hi))
                .collect(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    /// Minimum spread of per-level mean absolute error, meters.
    pub spread_threshold_m: f64,
    pub permutations: usize,
    pub p_value: f64,
    pub probe_accuracy: f64,
    pub probe: LogisticParams,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            spread_threshold_m: 0.25,
            permutations: 1000,
            p_value: 0.05,
            probe_accuracy: 0.80,
            probe: LogisticParams {
                epochs: 1000,
                learning_rate: 1.0,
                l2: 1e-3,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCoverage {
    pub factor: String,
    /// (level, samples, mean absolute error)
    pub level_errors: Vec<(String, usize, f64)>,
    pub spread_m: f64,
    pub permutation_p: f64,
    pub controlling: bool,
    pub probe_balanced_accuracy: Option<f64>,
    pub identified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Identified / controlling; `None` when no factor is controlling.
    pub coverage: Option<f64>,
    pub factors: Vec<FactorCoverage>,
}

fn level_means(levels: &[usize], errors: &[f64], count: usize) -> Vec<(usize, f64)> {
    let mut sums = vec![0.0; count];
    let mut ns = vec![0usize; count];
    for (l, e) in levels.iter().zip(errors) {
        sums[*l] += e;
        ns[*l] += 1;
    }
    ns.into_iter()
        .zip(sums)
        .map(|(n, s)| (n, if n > 0 { s / n as f64 } else { f64::NAN }))
        .collect()
}

fn spread(means: &[(usize, f64)]) -> f64 {
    let present: Vec<f64> = means.iter().filter(|(n, _)| *n > 0).map(|(_, m)| *m).collect();
    if present.len() < 2 {
        return 0.0;
    }
    let max = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = present.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

/// One-vs-rest logistic probe trained on even positions and scored by
/// balanced accuracy on odd positions.
pub fn probe_balanced_accuracy<X: AsRef<[f64]>>(
    thetas: &[X],
    levels: &[usize],
    level_count: usize,
    params: &LogisticParams,
) -> Result<Option<f64>> {
    let train: Vec<usize> = (0..thetas.len()).step_by(2).collect();
    let test: Vec<usize> = (1..thetas.len()).step_by(2).collect();
    if train.is_empty() || test.is_empty() {
        return Ok(None);
    }
    let xs: Vec<&[f64]> = train.iter().map(|i| thetas[*i].as_ref()).collect();
    let probes: Vec<SoftmaxRegression> = (0..level_count)
        .map(|l| {
            let ys: Vec<usize> = train.iter().map(|i| usize::from(levels[*i] == l)).collect();
            SoftmaxRegression::fit(&xs, &ys, 2, params)
        })
        .collect::<Result<_>>()?;
    let mut correct = vec![0usize; level_count];
    let mut total = vec![0usize; level_count];
    for i in test {
        let scores: Vec<f64> = probes
            .iter()
            .map(|p| p.predict(thetas[i].as_ref()).map(|q| q[1]))
            .collect::<Result<_>>()?;
        total[levels[i]] += 1;
        correct[levels[i]] += usize::from(argmax(&scores) == levels[i]);
    }
    let recalls: Vec<f64> = correct
        .iter()
        .zip(&total)
        .filter(|(_, t)| **t > 0)
        .map(|(c, t)| *c as f64 / *t as f64)
        .collect();
    Ok(Some(recalls.iter().sum::<f64>() / recalls.len() as f64))
}

/// Which ground-truth factors control agent error, and which of those a
/// simple probe can read back from θ.
pub fn compute_coverage<X: AsRef<[f64]>>(
    thetas: &[X],
    factors: &[FactorColumn],
    abs_errors: &[f64],
    config: &CoverageConfig,
) -> Result<CoverageReport> {
    if thetas.is_empty() || thetas.len() != abs_errors.len() {
        return Err(Error::InvalidInput("coverage needs one θ per error".into()));
    }
    let mut out = Vec::new();
    for (f_idx, factor) in factors.iter().enumerate() {
        if factor.levels.len() != abs_errors.len() {
            return Err(Error::InvalidInput(format!(
                "factor {} has {} levels for {} samples",
                factor.name,
                factor.levels.len(),
                abs_errors.len()
            )));
        }
        let count = factor.level_names.len();
        let means = level_means(&factor.levels, abs_errors, count);
        let observed = spread(&means);
        let mut rng = rng::rng(mix(config.seed, f_idx as u64), Stream::Permutation);
        let mut shuffled = abs_errors.to_vec();
        let mut extreme = 0usize;
        for _ in 0..config.permutations {
            shuffled.shuffle(&mut rng);
            if spread(&level_means(&factor.levels, &shuffled, count)) >= observed {
                extreme += 1;
            }
        }
        let p = (1 + extreme) as f64 / (1 + config.permutations) as f64;
        let controlling = observed > config.spread_threshold_m || p < config.p_value;
        let accuracy = if controlling {
            probe_balanced_accuracy(thetas, &factor.levels, count, &config.probe)?
        } else {
            None
        };
        out.push(FactorCoverage {
            factor: factor.name.clone(),
            level_errors: means
                .iter()
                .zip(&factor.level_names)
                .map(|((n, m), name)| (name.clone(), *n, *m))
                .collect(),
            spread_m: observed,
            permutation_p: p,
            controlling,
            probe_balanced_accuracy: accuracy,
            identified: accuracy.is_some_and(|a| a >= config.probe_accuracy),
        });
    }
    let controlling = out.iter().filter(|f| f.controlling).count();
    let identified = out.iter().filter(|f| f.identified).count();
    Ok(CoverageReport {
        coverage: (controlling > 0).then(|| identified as f64 / controlling as f64),
        factors: out,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub coverage: usize,
    pub correctness: usize,
    pub fidelity: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub coverage: Option<f64>,
    pub correctness_point: f64,
    pub correctness_distribution: f64,
    pub fidelity_coarse: f64,
    pub fidelity_fine: f64,
    pub brier_coarse: f64,
    pub brier_fine: f64,
    pub reliability: Vec<ReliabilityResult>,
    pub counts: SampleCounts,
    pub coverage_detail: Vec<FactorCoverage>,
}
