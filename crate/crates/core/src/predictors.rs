//! Competency predictors on condition vectors: a multinomial logistic
//! strategy classifier and a cell-based error-band regressor.

use serde::{Deserialize, Serialize};

use crate::conditions::{ConditionModel, ConditionVector, NoveltyScore, Tokenizer};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest, KMeansParams};
use crate::scene::Image;
use crate::stats::{argmax, mean, nearest_rank_sorted, squared_distance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.1,
            l2: 1e-3,
        }
    }
}

/// Weight magnitude beyond which training stops and reports divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

/// Multinomial logistic regression; `weights[k]` holds the intercept last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxRegression {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<Vec<f64>>,
    /// Set when the divergence guard stopped training early.
    pub diverged: bool,
    pub epochs_run: usize,
    pub loss_history: Vec<f64>,
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

impl SoftmaxRegression {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![vec![0.0; dim + 1]; classes],
            diverged: false,
            epochs_run: 0,
            loss_history: Vec::new(),
        }
    }

    pub fn fit<X: AsRef<[f64]>>(
        features: &[X],
        labels: &[usize],
        classes: usize,
        params: &LogisticParams,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features
            .first()
            .map(|x| x.as_ref().len())
            .ok_or_else(|| Error::InvalidInput("no training rows".into()))?;
        if classes == 0 {
            return Err(Error::InvalidArgument("at least one class required".into()));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::InvalidInput(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(i) = features.iter().position(|x| x.as_ref().len() != dim) {
            return Err(Error::InvalidInput(format!("row {i} has the wrong dimension")));
        }
        let mut model = Self::zeros(classes, dim);
        let mut lr = params.learning_rate;
        let mut halved = false;
        let (mut loss, mut grad) = model.loss_and_gradient(features, labels, params.l2);
        model.loss_history.push(loss);
        let mut epoch = 0;
        while epoch < params.epochs {
            let mut next = model.weights.clone();
            for (w, g) in next.iter_mut().zip(&grad) {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * gi;
                }
            }
            let candidate = Self {
                weights: next,
                ..Self::zeros(classes, dim)
            };
            let (new_loss, new_grad) = candidate.loss_and_gradient(features, labels, params.l2);
            if !new_loss.is_finite() {
                return Err(Error::NumericFailure {
                    epoch,
                    detail: "logistic loss is not finite".into(),
                });
            }
            if new_loss > loss + 1e-12 * loss.abs().max(1.0) {
                if halved {
                    return Err(Error::NumericFailure {
                        epoch,
                        detail: format!("loss rose from {loss} to {new_loss} after halving the step"),
                    });
                }
                halved = true;
                lr *= 0.5;
                continue;
            }
            model.weights = candidate.weights;
            (loss, grad) = (new_loss, new_grad);
            model.loss_history.push(loss);
            epoch += 1;
            let max_w = model
                .weights
                .iter()
                .flatten()
                .fold(0.0f64, |m, w| m.max(w.abs()));
            if max_w > DIVERGENCE_LIMIT {
                log::warn!("logistic weights exceeded {DIVERGENCE_LIMIT} at epoch {epoch}; stopping");
                model.diverged = true;
                break;
            }
        }
        model.epochs_run = epoch;
        Ok(model)
    }

    fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w[..self.dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[self.dim])
            .collect()
    }

    /// Mean cross-entropy plus `l2 / 2 · ||W||²` (intercepts unpenalized).
    fn loss_and_gradient<X: AsRef<[f64]>>(
        &self,
        features: &[X],
        labels: &[usize],
        l2: f64,
    ) -> (f64, Vec<Vec<f64>>) {
        let n = features.len() as f64;
        let mut grad = vec![vec![0.0; self.dim + 1]; self.classes];
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let x = x.as_ref();
            let mut p = self.scores(x);
            softmax_in_place(&mut p);
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
            for (k, g) in grad.iter_mut().enumerate() {
                let r = p[k] - if k == y { 1.0 } else { 0.0 };
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi += r * xi;
                }
                g[self.dim] += r;
            }
        }
        loss /= n;
        for (g, w) in grad.iter_mut().zip(&self.weights) {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi /= n;
                if i < self.dim {
                    *gi += l2 * w[i];
                    loss += 0.5 * l2 * w[i] * w[i];
                }
            }
        }
        (loss, grad)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "expected {} features, got {}",
                self.dim,
                x.len()
            )));
        }
        let mut p = self.scores(x);
        softmax_in_place(&mut p);
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPredictor {
    pub model: SoftmaxRegression,
}

impl StrategyPredictor {
    pub fn fit<X: AsRef<[f64]>>(
        thetas: &[X],
        strategy_ids: &[usize],
        strategies: usize,
        params: &LogisticParams,
    ) -> Result<Self> {
        Ok(Self {
            model: SoftmaxRegression::fit(thetas, strategy_ids, strategies, params)?,
        })
    }

    pub fn strategies(&self) -> usize {
        self.model.classes
    }

    pub fn predict_distribution(&self, theta: &ConditionVector) -> Result<Vec<f64>> {
        self.model.predict(&theta.theta)
    }

    pub fn predict_strategy(&self, theta: &ConditionVector) -> Result<usize> {
        Ok(argmax(&self.predict_distribution(theta)?))
    }
}

/// Minimum number of fit samples per condition cell.
pub const MIN_CELL_SAMPLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBand {
    pub q10: f64,
    pub q90: f64,
    pub mean: f64,
}

impl ErrorBand {
    pub fn contains(&self, signed_error: f64) -> bool {
        signed_error >= self.q10 && signed_error <= self.q90
    }

    fn from_errors(errors: &[f64]) -> Self {
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            q10: nearest_rank_sorted(&sorted, 0.1),
            q90: nearest_rank_sorted(&sorted, 0.9),
            mean: mean(errors),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCell {
    pub centroid: Vec<f64>,
    pub band: ErrorBand,
    pub fit_samples: usize,
    pub calibration_samples: usize,
    /// Empirical in-band rate of calibration samples in this cell.
    pub in_band_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPrediction {
    pub cell: usize,
    pub band: ErrorBand,
    pub in_band_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformancePredictor {
    pub cells: Vec<ConditionCell>,
    pub pooled_in_band_rate: f64,
}

impl PerformancePredictor {
    /// Clusters the non-calibration θ into up to `cells` cells, merges
    /// undersized cells into their nearest neighbour, then measures each
    /// cell's in-band rate on the calibration rows.
    pub fn fit<X: AsRef<[f64]> + Sync>(
        thetas: &[X],
        signed_errors: &[f64],
        calibration: &[bool],
        cells: usize,
        seed: u64,
    ) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::InvalidInput("no samples for the performance predictor".into()));
        }
        if thetas.len() != signed_errors.len() || thetas.len() != calibration.len() {
            return Err(Error::InvalidInput("θ, error and calibration lengths differ".into()));
        }
        if cells == 0 {
            return Err(Error::InvalidArgument("at least one cell required".into()));
        }
        let fit_rows: Vec<usize> = (0..thetas.len()).filter(|i| !calibration[*i]).collect();
        if fit_rows.is_empty() {
            return Err(Error::InvalidInput("every sample is in the calibration split".into()));
        }
        let points: Vec<&[f64]> = fit_rows.iter().map(|i| thetas[*i].as_ref()).collect();
        let k = cells.min(points.len());
        let fit = kmeans(&points, &KMeansParams::new(k, seed))?;
        let (centroids, members) = merge_small_cells(&points, fit.centroids, fit.assignments);

        let mut cells: Vec<ConditionCell> = centroids
            .into_iter()
            .zip(&members)
            .map(|(centroid, rows)| {
                let errs: Vec<f64> = rows.iter().map(|r| signed_errors[fit_rows[*r]]).collect();
                ConditionCell {
                    centroid,
                    band: ErrorBand::from_errors(&errs),
                    fit_samples: rows.len(),
                    calibration_samples: 0,
                    in_band_rate: 0.0,
                }
            })
            .collect();

        let mut hits = vec![0usize; cells.len()];
        let centroids: Vec<&[f64]> = cells.iter().map(|c| c.centroid.as_slice()).collect();
        let lookups: Vec<(usize, bool)> = (0..thetas.len())
            .filter(|i| calibration[*i])
            .map(|i| {
                let (c, _) = nearest(&centroids, thetas[i].as_ref());
                (c, cells[c].band.contains(signed_errors[i]))
            })
            .collect();
        for (c, hit) in &lookups {
            cells[*c].calibration_samples += 1;
            hits[*c] += usize::from(*hit);
        }
        let pooled = if lookups.is_empty() {
            None
        } else {
            Some(lookups.iter().filter(|(_, h)| *h).count() as f64 / lookups.len() as f64)
        };
        for ((cell, h), rows) in cells.iter_mut().zip(hits).zip(&members) {
            cell.in_band_rate = match pooled {
                _ if cell.calibration_samples > 0 => h as f64 / cell.calibration_samples as f64,
                Some(p) => p,
                // No calibration rows at all: fall back to the fit rows' own rate.
                None => {
                    rows.iter()
                        .filter(|r| cell.band.contains(signed_errors[fit_rows[**r]]))
                        .count() as f64
                        / rows.len() as f64
                }
            };
        }
        let pooled_in_band_rate = pooled.unwrap_or_else(|| {
            let total: usize = cells.iter().map(|c| c.fit_samples).sum();
            cells
                .iter()
                .map(|c| c.in_band_rate * c.fit_samples as f64)
                .sum::<f64>()
                / total as f64
        });
        Ok(Self {
            cells,
            pooled_in_band_rate,
        })
    }

    pub fn dim(&self) -> usize {
        self.cells[0].centroid.len()
    }

    pub fn predict(&self, theta: &ConditionVector) -> Result<BandPrediction> {
        if theta.theta.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "expected θ of length {}, got {}",
                self.dim(),
                theta.theta.len()
            )));
        }
        let centroids: Vec<&[f64]> = self.cells.iter().map(|c| c.centroid.as_slice()).collect();
        let (cell, _) = nearest(&centroids, &theta.theta);
        Ok(BandPrediction {
            cell,
            band: self.cells[cell].band,
            in_band_probability: self.cells[cell].in_band_rate,
        })
    }
}

fn member_mean(rows: &[usize], points: &[&[f64]]) -> Vec<f64> {
    let dim = points[0].len();
    let mut m = vec![0.0; dim];
    for r in rows {
        for (a, b) in m.iter_mut().zip(points[*r]) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

/// Drops empty clusters, then repeatedly folds the smallest undersized cell
/// (lowest id on ties) into the cell with the nearest centroid.
fn merge_small_cells(
    points: &[&[f64]],
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); centroids.len()];
    for (i, a) in assignments.into_iter().enumerate() {
        members[a].push(i);
    }
    let mut groups: Vec<(Vec<f64>, Vec<usize>)> = centroids
        .into_iter()
        .zip(members)
        .filter(|(_, m)| !m.is_empty())
        .collect();
    while groups.len() > 1 {
        let Some((small, _)) = groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.1.len() < MIN_CELL_SAMPLES)
            .min_by_key(|(i, g)| (g.1.len(), *i))
        else {
            break;
        };
        let (centroid, rows) = groups.remove(small);
        let others: Vec<&[f64]> = groups.iter().map(|g| g.0.as_slice()).collect();
        let (target, _) = nearest(&others, &centroid);
        groups[target].1.extend(rows);
        groups[target].1.sort_unstable();
        groups[target].0 = member_mean(&groups[target].1, points);
    }
    groups.into_iter().unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetencyEstimate {
    pub theta: ConditionVector,
    pub novelty: NoveltyScore,
    pub strategy_distribution: Vec<f64>,
    pub error_band: ErrorBand,
    pub cell: usize,
    pub in_band_probability: f64,
}

/// Everything needed to estimate competency from an image alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompetencyModels {
    pub tokenizer: Tokenizer,
    pub conditions: ConditionModel,
    pub strategy: StrategyPredictor,
    pub performance: PerformancePredictor,
}

impl CompetencyModels {
    pub fn estimate(&self, image: &Image) -> Result<CompetencyEstimate> {
        let doc = self
            .tokenizer
            .tokenize(0, image, None)
            .map_err(|e| e.in_stage("tokenize"))?;
        let theta = self.conditions.infer(&doc).map_err(|e| e.in_stage("conditions"))?;
        let novelty = self
            .conditions
            .novelty_with(&doc, &theta)
            .map_err(|e| e.in_stage("novelty"))?;
        let strategy_distribution = self
            .strategy
            .predict_distribution(&theta)
            .map_err(|e| e.in_stage("strategy prediction"))?;
        let band = self
            .performance
            .predict(&theta)
            .map_err(|e| e.in_stage("performance prediction"))?;
        Ok(CompetencyEstimate {
            theta,
            novelty,
            strategy_distribution,
            error_band: band.band,
            cell: band.cell,
            in_band_probability: band.in_band_probability,
        })
    }
}

/// Distance from θ to the nearest performance cell, for diagnostics.
pub fn cell_distance(pred: &PerformancePredictor, theta: &[f64]) -> f64 {
    pred.cells
        .iter()
        .map(|c| squared_distance(&c.centroid, theta))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}
