//! Independent oracles shared by integration tests.

#![allow(dead_code)]

use competency::conditions::{BetaMode, Document, HdpConfig, HdpSampler};
use competency::rng::mix;
use statrs::function::gamma::ln_gamma;

/// "a a b" / "b c c" with a=0, b=1, c=2.
pub fn tiny_corpus() -> Vec<Document> {
    vec![Document::visual(0, vec![0, 0, 1]), Document::visual(1, vec![1, 2, 2])]
}

pub const TINY_VOCAB: usize = 3;

pub fn tiny_config(seed: u64) -> HdpConfig {
    HdpConfig {
        topics: 2,
        alpha: 1.0,
        eta: 0.5,
        seed,
        beta_mode: BetaMode::FixedUniform,
        ..HdpConfig::default()
    }
}

/// Exact posterior over all T^N joint assignments of the collapsed model
/// with fixed uniform β. State bits follow token order across documents.
pub fn enumerate_posterior(docs: &[Vec<u32>], vocab: usize, topics: usize, alpha: f64, eta: f64) -> Vec<f64> {
    let n: usize = docs.iter().map(Vec::len).sum();
    let states = topics.pow(n as u32);
    let ab = alpha / topics as f64;
    let mut logp = Vec::with_capacity(states);
    for s in 0..states {
        let mut z = Vec::with_capacity(n);
        let mut code = s;
        for _ in 0..n {
            z.push(code % topics);
            code /= topics;
        }
        let mut nkw = vec![vec![0usize; vocab]; topics];
        let mut nk = vec![0usize; topics];
        let mut lp = 0.0;
        let mut pos = 0;
        for doc in docs {
            let mut ndk = vec![0usize; topics];
            for w in doc {
                let k = z[pos];
                ndk[k] += 1;
                nkw[k][*w as usize] += 1;
                nk[k] += 1;
                pos += 1;
            }
            for c in ndk {
                lp += ln_gamma(c as f64 + ab) - ln_gamma(ab);
            }
        }
        for k in 0..topics {
            for w in 0..vocab {
                lp += ln_gamma(nkw[k][w] as f64 + eta) - ln_gamma(eta);
            }
            lp += ln_gamma(vocab as f64 * eta) - ln_gamma(nk[k] as f64 + vocab as f64 * eta);
        }
        logp.push(lp);
    }
    let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logp.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Encodes assignments with the same bit order as [`enumerate_posterior`].
pub fn state_index(assignments: &[Vec<u16>], topics: usize) -> usize {
    let mut idx = 0;
    let mut scale = 1;
    for k in assignments.iter().flatten() {
        idx += *k as usize * scale;
        scale *= topics;
    }
    idx
}

/// P(token i has topic 0) for every token under `joint`.
pub fn token_marginals(joint: &[f64], tokens: usize, topics: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; topics]; tokens];
    for (s, p) in joint.iter().enumerate() {
        let mut code = s;
        for m in out.iter_mut() {
            m[code % topics] += p;
            code /= topics;
        }
    }
    out
}

/// Empirical state frequencies from a long Gibbs run.
pub fn gibbs_frequencies(seed: u64, burn_in: usize, samples: usize) -> (Vec<f64>, bool) {
    let corpus = tiny_corpus();
    let mut sampler = HdpSampler::new(&corpus, TINY_VOCAB, tiny_config(seed)).unwrap();
    let mut counts = vec![0usize; 1 << 6];
    let mut conserved = sampler.counts_consistent();
    sampler.run(burn_in);
    for _ in 0..samples {
        sampler.sweep();
        conserved &= sampler.counts_consistent();
        counts[state_index(sampler.assignments(), 2)] += 1;
    }
    (counts.iter().map(|c| *c as f64 / samples as f64).collect(), conserved)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Deterministic small point sets: (points, k) with 3..=8 points and K ≤ 3.
pub fn clustering_fixtures() -> Vec<(Vec<Vec<f64>>, usize)> {
    let mut out = Vec::new();
    for f in 0..40u64 {
        let n = 3 + (f % 6) as usize;
        let dim = 1 + (f % 3) as usize;
        let k = 1 + (f % 3) as usize;
        let points = (0..n as u64)
            .map(|i| {
                (0..dim as u64)
                    .map(|d| {
                        let cluster = (mix(f, i) % 3) as f64 * 4.0;
                        cluster + (mix(mix(f, i), d + 1) % 10_000) as f64 / 5_000.0
                    })
                    .collect()
            })
            .collect();
        out.push((points, k));
    }
    out
}

pub fn sse(points: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(assignments).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        for j in 0..dim {
            let mean = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
            total += members.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>();
        }
    }
    total
}

/// Minimum within-cluster SSE over every partition into exactly `k`
/// non-empty clusters.
pub fn brute_force_min_sse(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut used = vec![false; k];
        labels.iter().for_each(|l| used[*l] = true);
        if used.iter().all(|u| *u) {
            best = best.min(sse(points, &labels, k));
        }
    }
    best
}
