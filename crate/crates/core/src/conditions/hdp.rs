//! Truncated direct-assignment HDP: collapsed Gibbs over token topics with
//! global topic weights β, plus frozen-topic fold-in for unseen documents.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::document::{Document, TokenLabel, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{self, mix_all, Stream};
use crate::stats::nearest_rank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// Resample β after every sweep.
    Resample,
    /// Keep β uniform (used by the enumeration oracle).
    FixedUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdpConfig {
    pub topics: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub eta: f64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub beta_mode: BetaMode,
    pub fold_in_sweeps: usize,
    /// Fold-in θ is averaged over this many final sweeps.
    pub fold_in_average: usize,
    pub novelty_percentile: f64,
}

impl Default for HdpConfig {
    fn default() -> Self {
        Self {
            topics: 20,
            gamma: 1.0,
            alpha: 1.0,
            eta: 0.1,
            sweeps: 500,
            burn_in: 300,
            seed: 0,
            beta_mode: BetaMode::Resample,
            fold_in_sweeps: 50,
            fold_in_average: 25,
            novelty_percentile: 0.01,
        }
    }
}

impl HdpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(Error::Configuration(format!(
                "truncation level must be at least 2, got {}",
                self.topics
            )));
        }
        if self.topics > u16::MAX as usize {
            return Err(Error::Configuration("too many topics".into()));
        }
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("eta", self.eta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Configuration(format!("{name} must be positive, got {v}")));
            }
        }
        if self.fold_in_average == 0 || self.fold_in_average > self.fold_in_sweeps {
            return Err(Error::Configuration(format!(
                "fold-in averages over {} of {} sweeps",
                self.fold_in_average, self.fold_in_sweeps
            )));
        }
        if !(0.0..=1.0).contains(&self.novelty_percentile) {
            return Err(Error::Configuration("novelty percentile outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Collapsed Gibbs sampler state. Counts are kept word-major so the inner
/// loop over topics reads contiguous memory.
#[derive(Debug, Clone)]
pub struct HdpSampler {
    config: HdpConfig,
    vocab_size: usize,
    docs: Vec<Vec<u32>>,
    z: Vec<Vec<u16>>,
    doc_topic: Vec<Vec<u32>>,
    word_topic: Vec<u32>,
    topic_total: Vec<u32>,
    beta: Vec<f64>,
    rng: ChaCha8Rng,
    sweeps_done: usize,
    weights: Vec<f64>,
}

impl HdpSampler {
    pub fn new(corpus: &[Document], vocab_size: usize, config: HdpConfig) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::InvalidInput("empty corpus".into()));
        }
        for doc in corpus {
            if let Some(t) = doc.tokens.iter().find(|t| **t as usize >= vocab_size) {
                return Err(Error::InvalidInput(format!(
                    "document {} has token {t} outside vocabulary of {vocab_size}",
                    doc.doc_id
                )));
            }
        }
        let t = config.topics;
        let mut s = Self {
            vocab_size,
            docs: corpus.iter().map(|d| d.tokens.clone()).collect(),
            z: corpus.iter().map(|d| vec![0; d.tokens.len()]).collect(),
            doc_topic: vec![vec![0; t]; corpus.len()],
            word_topic: vec![0; vocab_size * t],
            topic_total: vec![0; t],
            beta: vec![1.0 / t as f64; t],
            rng: rng::rng(config.seed, Stream::Gibbs),
            sweeps_done: 0,
            weights: vec![0.0; t],
            config,
        };
        // Sequential initialization: each token drawn from the conditional
        // given the tokens placed before it.
        for d in 0..s.docs.len() {
            for i in 0..s.docs[d].len() {
                let w = s.docs[d][i] as usize;
                let topic = s.draw(d, w);
                s.place(d, i, w, topic);
            }
        }
        Ok(s)
    }

    fn draw(&mut self, d: usize, w: usize) -> usize {
        let t = self.config.topics;
        let (alpha, eta) = (self.config.alpha, self.config.eta);
        let v_eta = eta * self.vocab_size as f64;
        let row = &self.word_topic[w * t..(w + 1) * t];
        let mut total = 0.0;
        for k in 0..t {
            let p = (self.doc_topic[d][k] as f64 + alpha * self.beta[k]) * (row[k] as f64 + eta)
                / (self.topic_total[k] as f64 + v_eta);
            total += p;
            self.weights[k] = total;
        }
        sample_cumulative(&self.weights, self.rng.random::<f64>() * total)
    }

    fn place(&mut self, d: usize, i: usize, w: usize, topic: usize) {
        let t = self.config.topics;
        self.z[d][i] = topic as u16;
        self.doc_topic[d][topic] += 1;
        self.word_topic[w * t + topic] += 1;
        self.topic_total[topic] += 1;
    }

    fn remove(&mut self, d: usize, i: usize, w: usize) {
        let t = self.config.topics;
        let topic = self.z[d][i] as usize;
        self.doc_topic[d][topic] -= 1;
        self.word_topic[w * t + topic] -= 1;
        self.topic_total[topic] -= 1;
    }

    pub fn sweep(&mut self) {
        for d in 0..self.docs.len() {
            for i in 0..self.docs[d].len() {
                let w = self.docs[d][i] as usize;
                self.remove(d, i, w);
                let topic = self.draw(d, w);
                self.place(d, i, w, topic);
            }
        }
        if self.config.beta_mode == BetaMode::Resample {
            self.resample_beta();
        }
        self.sweeps_done += 1;
    }

    /// Table counts via the Antoniak construction, then
    /// β ~ Dir(m_1 + γ/T, …, m_T + γ/T).
    fn resample_beta(&mut self) {
        let t = self.config.topics;
        let alpha = self.config.alpha;
        let mut tables = vec![0u64; t];
        for row in &self.doc_topic {
            for k in 0..t {
                let ab = alpha * self.beta[k];
                for j in 0..row[k] {
                    if self.rng.random::<f64>() < ab / (ab + j as f64) {
                        tables[k] += 1;
                    }
                }
            }
        }
        let slot = self.config.gamma / t as f64;
        let mut draws: Vec<f64> = tables
            .iter()
            .map(|m| {
                Gamma::new(*m as f64 + slot, 1.0)
                    .expect("positive shape")
                    .sample(&mut self.rng)
                    .max(f64::MIN_POSITIVE)
            })
            .collect();
        let sum: f64 = draws.iter().sum();
        for v in &mut draws {
            *v = (*v / sum).max(f64::MIN_POSITIVE);
        }
        let sum: f64 = draws.iter().sum();
        for v in &mut draws {
            *v /= sum;
        }
        self.beta = draws;
    }

    pub fn run(&mut self, sweeps: usize) {
        for _ in 0..sweeps {
            self.sweep();
        }
    }

    pub fn sweeps_done(&self) -> usize {
        self.sweeps_done
    }

    pub fn assignments(&self) -> &[Vec<u16>] {
        &self.z
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn topic_totals(&self) -> &[u32] {
        &self.topic_total
    }

    pub fn doc_topic_counts(&self) -> &[Vec<u32>] {
        &self.doc_topic
    }

    /// Count of token `w` assigned to topic `t`.
    pub fn topic_word(&self, t: usize, w: usize) -> u32 {
        self.word_topic[w * self.config.topics + t]
    }

    pub fn token_count(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// Recounts every table from the assignment vector and compares.
    pub fn counts_consistent(&self) -> bool {
        let t = self.config.topics;
        let mut wt = vec![0u32; self.vocab_size * t];
        let mut tt = vec![0u32; t];
        for (d, (doc, z)) in self.docs.iter().zip(&self.z).enumerate() {
            let mut dt = vec![0u32; t];
            for (w, k) in doc.iter().zip(z) {
                wt[*w as usize * t + *k as usize] += 1;
                tt[*k as usize] += 1;
                dt[*k as usize] += 1;
            }
            if dt != self.doc_topic[d] {
                return false;
            }
        }
        wt == self.word_topic
            && tt == self.topic_total
            && tt.iter().map(|c| *c as usize).sum::<usize>() == self.token_count()
    }

    fn into_model(self, vocab: &Vocabulary, doc_ids: Vec<u64>) -> ConditionModel {
        let t = self.config.topics;
        let (alpha, eta) = (self.config.alpha, self.config.eta);
        let v = self.vocab_size;
        let mut phi = vec![0.0; v * t];
        for w in 0..v {
            for k in 0..t {
                phi[w * t + k] = (self.word_topic[w * t + k] as f64 + eta)
                    / (self.topic_total[k] as f64 + eta * v as f64);
            }
        }
        let doc_theta = self
            .doc_topic
            .iter()
            .zip(&self.docs)
            .map(|(row, doc)| {
                let n = doc.len() as f64;
                row.iter()
                    .zip(&self.beta)
                    .map(|(c, b)| (*c as f64 + alpha * b) / (n + alpha))
                    .collect()
            })
            .collect();
        ConditionModel {
            active: self.topic_total.iter().map(|c| *c > 0).collect(),
            topic_word: (0..t)
                .map(|k| (0..v).map(|w| self.word_topic[w * t + k]).collect())
                .collect(),
            topic_total: self.topic_total,
            beta: self.beta,
            assignments: self.z,
            doc_ids,
            doc_theta,
            phi,
            novelty_threshold: f64::NEG_INFINITY,
            vocab: vocab.clone(),
            config: self.config,
        }
    }
}

fn sample_cumulative(cumulative: &[f64], u: f64) -> usize {
    cumulative
        .iter()
        .position(|c| u < *c)
        .unwrap_or(cumulative.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub theta: Vec<f64>,
}

impl ConditionVector {
    pub fn dominant_topic(&self) -> usize {
        crate::stats::argmax(&self.theta)
    }
}

impl AsRef<[f64]> for ConditionVector {
    fn as_ref(&self) -> &[f64] {
        &self.theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyScore {
    pub score: f64,
    pub threshold: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicTerm {
    pub token: u32,
    pub label: TokenLabel,
    pub weight: f64,
}

/// A fitted, immutable condition model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionModel {
    pub config: HdpConfig,
    pub vocab: Vocabulary,
    pub beta: Vec<f64>,
    /// Topic-major token counts, `topic_word[t][w]`.
    pub topic_word: Vec<Vec<u32>>,
    pub topic_total: Vec<u32>,
    pub active: Vec<bool>,
    pub assignments: Vec<Vec<u16>>,
    pub doc_ids: Vec<u64>,
    /// θ of every training document at the final sweep.
    pub doc_theta: Vec<Vec<f64>>,
    /// Smoothed topic-token distribution, word-major `phi[w * T + t]`.
    phi: Vec<f64>,
    pub novelty_threshold: f64,
}

/// Runs the configured number of sweeps and freezes the final state.
pub fn fit_hdp(corpus: &[Document], vocab: &Vocabulary, config: HdpConfig) -> Result<ConditionModel> {
    let sweeps = config.sweeps;
    let mut sampler = HdpSampler::new(corpus, vocab.size(), config)?;
    for s in 0..sweeps {
        sampler.sweep();
        if (s + 1) % 100 == 0 {
            log::debug!(
                "hdp sweep {}: {} active topics",
                s + 1,
                sampler.topic_totals().iter().filter(|c| **c > 0).count()
            );
        }
    }
    let mut model = sampler.into_model(vocab, corpus.iter().map(|d| d.doc_id).collect());
    if model.active_topics() == model.config.topics {
        log::warn!("all {} topics active; truncation may bind", model.config.topics);
    }
    let scores: Vec<f64> = corpus
        .iter()
        .map(|d| d.visual_part(vocab))
        .filter(|d| !d.tokens.is_empty())
        .map(|d| model.novelty(&d).map(|n| n.score))
        .collect::<Result<_>>()?;
    model.novelty_threshold =
        nearest_rank(&scores, model.config.novelty_percentile).unwrap_or(f64::NEG_INFINITY);
    Ok(model)
}

impl ConditionModel {
    pub fn topics(&self) -> usize {
        self.config.topics
    }

    pub fn active_topics(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn phi(&self, topic: usize, token: u32) -> f64 {
        self.phi[token as usize * self.config.topics + topic]
    }

    fn check_inference_doc(&self, doc: &Document) -> Result<()> {
        if doc.competency_tokens_present {
            return Err(Error::InvalidInput(format!(
                "document {} carries competency tokens at inference",
                doc.doc_id
            )));
        }
        if doc.tokens.is_empty() {
            return Err(Error::InvalidInput(format!("document {} is empty", doc.doc_id)));
        }
        if let Some(t) = doc.tokens.iter().find(|t| !self.vocab.is_visual(**t)) {
            return Err(Error::InvalidInput(format!(
                "document {} has non-visual token {t} at inference",
                doc.doc_id
            )));
        }
        Ok(())
    }

    /// Fold-in Gibbs with frozen topic-token counts; θ averaged over the
    /// final sweeps.
    pub fn infer_conditions(&self, doc: &Document, seed: u64) -> Result<ConditionVector> {
        self.check_inference_doc(doc)?;
        let t = self.config.topics;
        let alpha = self.config.alpha;
        let mut rng = rng::rng(seed, Stream::FoldIn);
        let mut counts = vec![0u32; t];
        let mut z = vec![0usize; doc.tokens.len()];
        let mut weights = vec![0.0; t];
        let mut resample = |counts: &mut Vec<u32>, w: u32, rng: &mut ChaCha8Rng| {
            let row = &self.phi[w as usize * t..(w as usize + 1) * t];
            let mut total = 0.0;
            for k in 0..t {
                total += (counts[k] as f64 + alpha * self.beta[k]) * row[k];
                weights[k] = total;
            }
            let k = sample_cumulative(&weights, rng.random::<f64>() * total);
            counts[k] += 1;
            k
        };
        for (i, w) in doc.tokens.iter().enumerate() {
            z[i] = resample(&mut counts, *w, &mut rng);
        }
        let n = doc.tokens.len() as f64;
        let mut theta = vec![0.0; t];
        let first_kept = self.config.fold_in_sweeps - self.config.fold_in_average;
        for sweep in 0..self.config.fold_in_sweeps {
            for (i, w) in doc.tokens.iter().enumerate() {
                counts[z[i]] -= 1;
                z[i] = resample(&mut counts, *w, &mut rng);
            }
            if sweep >= first_kept {
                for k in 0..t {
                    theta[k] += (counts[k] as f64 + alpha * self.beta[k]) / (n + alpha);
                }
            }
        }
        let sum: f64 = theta.iter().sum();
        theta.iter_mut().for_each(|v| *v /= sum);
        Ok(ConditionVector { theta })
    }

    /// Fold-in seed derived from the model seed and document content, so
    /// identical documents always receive identical condition vectors.
    pub fn content_seed(&self, doc: &Document) -> u64 {
        mix_all(self.config.seed, doc.tokens.iter().map(|t| *t as u64))
    }

    pub fn infer(&self, doc: &Document) -> Result<ConditionVector> {
        self.infer_conditions(doc, self.content_seed(doc))
    }

    /// Per-token log-likelihood under the smoothed topics, scored against
    /// the novelty threshold stored at fit time.
    pub fn novelty_with(&self, doc: &Document, theta: &ConditionVector) -> Result<NoveltyScore> {
        self.check_inference_doc(doc)?;
        let t = self.config.topics;
        let total: f64 = doc
            .tokens
            .iter()
            .map(|w| {
                let row = &self.phi[*w as usize * t..(*w as usize + 1) * t];
                row.iter().zip(&theta.theta).map(|(p, th)| p * th).sum::<f64>().ln()
            })
            .sum();
        let score = total / doc.tokens.len() as f64;
        Ok(NoveltyScore {
            score,
            threshold: self.novelty_threshold,
            flag: score < self.novelty_threshold,
        })
    }

    pub fn novelty(&self, doc: &Document) -> Result<NoveltyScore> {
        let theta = self.infer(doc)?;
        self.novelty_with(doc, &theta)
    }

    /// Top ten tokens of φ_t, heaviest first, lowest token id on ties.
    pub fn describe_topic(&self, topic: usize) -> Result<Vec<TopicTerm>> {
        if topic >= self.config.topics || !self.active[topic] {
            return Err(Error::InvalidInput(format!("topic {topic} is not active")));
        }
        let mut terms: Vec<(u32, f64)> = (0..self.vocab.size() as u32)
            .map(|w| (w, self.phi(topic, w)))
            .collect();
        terms.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(terms
            .into_iter()
            .take(10)
            .map(|(token, weight)| TopicTerm {
                token,
                label: self.vocab.label(token).expect("token within vocabulary"),
                weight,
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        let (t, v) = (m.config.topics, m.vocab.size());
        if m.phi.len() != t * v
            || m.beta.len() != t
            || m.topic_word.len() != t
            || m.active.len() != t
        {
            return Err(Error::Format("condition model dimensions disagree".into()));
        }
        Ok(m)
    }
}
