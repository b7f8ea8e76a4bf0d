//! Closed-loop 1-D approach: the vehicle drives toward an obstacle, the
//! agent estimates distance each tick and maneuvers when the estimate drops
//! below the trigger; the monitor may slow down, maneuver early or hand off.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::error::{Error, Result};
use crate::guard::{
    monitor_step, ActionKind, ConditionTags, GuardModels, Monitor, MonitorConfig, Requirement,
};
use crate::rng::mix;
use crate::scene::{
    FactorWeights, Sample, SceneParams, TimeOfDay, Weather, MAX_DISTANCE_M, MAX_LATERAL_OFFSET,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Perception {
    pub estimate_m: f64,
    pub trace: Option<Vec<f64>>,
}

pub trait Perceiver: Sync {
    fn perceive(&self, sample: &Sample) -> Result<Perception>;
}

impl Perceiver for Agent {
    fn perceive(&self, sample: &Sample) -> Result<Perception> {
        let (estimate_m, trace) = self.forward(&sample.image)?;
        Ok(Perception {
            estimate_m,
            trace: Some(trace.values),
        })
    }
}

/// Wraps a function of the rendered sample; handy for scripted estimators.
pub struct FnPerceiver<F>(pub F);

impl<F: Fn(&Sample) -> f64 + Sync> Perceiver for FnPerceiver<F> {
    fn perceive(&self, sample: &Sample) -> Result<Perception> {
        Ok(Perception {
            estimate_m: (self.0)(sample),
            trace: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub initial_distance_m: f64,
    pub speed_mps: f64,
    pub tick_s: f64,
    /// Maneuver when the estimate is at or below this distance.
    pub trigger_m: f64,
    /// Maneuvering at or beyond this true distance counts as in time.
    pub margin_m: f64,
    /// Maneuvers at or beyond this true distance are flagged premature.
    pub premature_m: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            initial_distance_m: 30.0,
            speed_mps: 10.0,
            tick_s: 0.1,
            trigger_m: 8.0,
            margin_m: 2.0,
            premature_m: 12.0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_m > 0.0 && self.trigger_m > self.margin_m) {
            return Err(Error::Configuration(format!(
                "need trigger ({}) > margin ({}) > 0",
                self.trigger_m, self.margin_m
            )));
        }
        if !(self.speed_mps > 0.0 && self.tick_s > 0.0) {
            return Err(Error::Configuration("speed and tick must be positive".into()));
        }
        if !(self.margin_m..=MAX_DISTANCE_M).contains(&self.initial_distance_m) {
            return Err(Error::Configuration(format!(
                "initial distance {} outside [{}, {MAX_DISTANCE_M}]",
                self.initial_distance_m, self.margin_m
            )));
        }
        Ok(())
    }

    pub fn step_m(&self) -> f64 {
        self.speed_mps * self.tick_s
    }
}

/// Scene factors held fixed for a whole episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCondition {
    pub tags: ConditionTags,
    pub lateral_offset: f64,
}

impl EpisodeCondition {
    pub fn from_params(p: &SceneParams) -> Self {
        Self {
            tags: ConditionTags::of(p),
            lateral_offset: p.lateral_offset.clamp(-MAX_LATERAL_OFFSET, MAX_LATERAL_OFFSET),
        }
    }
}

/// Monitor inputs for gated runs.
#[derive(Debug, Clone, Copy)]
pub struct Guard<'a> {
    pub models: &'a GuardModels,
    pub requirements: &'a [Requirement],
    pub config: &'a MonitorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    DetectedInTime,
    Collision,
    HandedOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub true_distance_m: f64,
    pub estimate_m: f64,
    pub action: ActionKind,
    pub p_miss: Option<f64>,
    pub novelty: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    pub seed: u64,
    pub gated: bool,
    pub tags: ConditionTags,
    pub ticks: Vec<TickRecord>,
    pub outcome: Outcome,
    pub premature: bool,
    pub maneuver_distance_m: Option<f64>,
}

impl EpisodeLog {
    pub fn fallback_issued(&self) -> bool {
        self.ticks.iter().any(|t| t.action != ActionKind::Proceed)
    }

    pub fn max_p_miss(&self) -> Option<f64> {
        self.ticks
            .iter()
            .filter_map(|t| t.p_miss)
            .filter(|p| !p.is_nan())
            .reduce(f64::max)
    }
}

pub fn run_episode(
    perceiver: &dyn Perceiver,
    guard: Option<Guard<'_>>,
    gated: bool,
    config: &EpisodeConfig,
    condition: &EpisodeCondition,
    episode: u64,
    seed: u64,
) -> Result<EpisodeLog> {
    config.validate()?;
    let mut monitor = match (gated, guard) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Configuration("gated episode without fitted guard models".into()))
        }
        (true, Some(g)) => Some((
            g,
            Monitor::new(g.requirements, g.config, g.models.probe.as_ref())?,
        )),
    };
    let mut distance = config.initial_distance_m;
    let mut step = config.step_m();
    let mut ticks = Vec::new();
    let mut tick = 0usize;
    let (outcome, premature, maneuver_distance_m) = loop {
        if distance < config.margin_m {
            break (Outcome::Collision, false, None);
        }
        let params = SceneParams {
            distance_m: distance,
            obstacle_kind: condition.tags.obstacle_kind,
            weather: condition.tags.weather,
            time_of_day: condition.tags.time_of_day,
            lateral_offset: condition.lateral_offset,
            noise_seed: mix(seed, tick as u64),
        };
        let sample = Sample::render(params)?;
        let perception = perceiver.perceive(&sample)?;
        let (action, p_miss, novelty) = match monitor.as_mut() {
            None => (ActionKind::Proceed, None, None),
            Some((g, m)) => {
                let (a, c) = monitor_step(
                    m,
                    g.models,
                    &sample.image,
                    perception.trace.as_deref(),
                    perception.estimate_m,
                    condition.tags,
                )?;
                (a.kind, Some(a.reason.p_miss), Some(c.novelty.flag))
            }
        };
        ticks.push(TickRecord {
            tick,
            true_distance_m: distance,
            estimate_m: perception.estimate_m,
            action,
            p_miss,
            novelty,
        });
        if action == ActionKind::Handoff {
            break (Outcome::HandedOff, false, None);
        }
        if action == ActionKind::PreemptiveManeuver || perception.estimate_m <= config.trigger_m {
            break (
                Outcome::DetectedInTime,
                distance >= config.premature_m,
                Some(distance),
            );
        }
        if action == ActionKind::ReduceSpeed {
            step *= 0.5;
        }
        distance -= step;
        tick += 1;
    };
    Ok(EpisodeLog {
        episode,
        seed,
        gated,
        tags: condition.tags,
        ticks,
        outcome,
        premature,
        maneuver_distance_m,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub episodes: usize,
    pub detected: usize,
    pub collisions: usize,
    pub handed_off: usize,
    pub premature: usize,
}

impl OutcomeCounts {
    fn add(&mut self, log: &EpisodeLog) {
        self.episodes += 1;
        match log.outcome {
            Outcome::DetectedInTime => self.detected += 1,
            Outcome::Collision => self.collisions += 1,
            Outcome::HandedOff => self.handed_off += 1,
        }
        self.premature += usize::from(log.premature);
    }

    pub fn detection_rate(&self) -> f64 {
        ratio(self.detected, self.episodes)
    }

    /// Detections plus hand-offs: episodes that ended without a collision.
    pub fn safe_rate(&self) -> f64 {
        ratio(self.detected + self.handed_off, self.episodes)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
    pub counts: OutcomeCounts,
    pub detection_rate: f64,
    pub safe_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub logs: Vec<EpisodeLog>,
    pub overall: OutcomeCounts,
    /// One row per (weather, time of day) seen, in factor order.
    pub summaries: Vec<ConditionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub episodes: usize,
    pub conditions: FactorWeights,
    pub master_seed: u64,
    pub gated: bool,
    pub config: EpisodeConfig,
}

/// Runs independent episodes; episode `i` uses seed `mix(master_seed, i)`
/// for both its condition draw and its per-tick render noise, so gated and
/// ungated batches with the same master seed are paired.
pub fn run_batch(
    spec: &BatchSpec,
    perceiver: &dyn Perceiver,
    guard: Option<Guard<'_>>,
    workers: Option<usize>,
) -> Result<BatchResult> {
    if spec.episodes == 0 {
        return Err(Error::InvalidArgument("a batch needs at least one episode".into()));
    }
    spec.conditions.validate()?;
    spec.config.validate()?;
    let run = || -> Result<Vec<EpisodeLog>> {
        (0..spec.episodes as u64)
            .into_par_iter()
            .map(|i| {
                let seed = mix(spec.master_seed, i);
                let condition = EpisodeCondition::from_params(&spec.conditions.draw(seed));
                run_episode(perceiver, guard, spec.gated, &spec.config, &condition, i, seed)
            })
            .collect()
    };
    let logs = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Configuration(format!("worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(summarize(logs))
}

pub fn summarize(logs: Vec<EpisodeLog>) -> BatchResult {
    let mut overall = OutcomeCounts::default();
    let mut cells = vec![OutcomeCounts::default(); Weather::ALL.len() * TimeOfDay::ALL.len()];
    for log in &logs {
        overall.add(log);
        cells[log.tags.weather.index() * TimeOfDay::ALL.len() + log.tags.time_of_day.index()]
            .add(log);
    }
    let summaries = cells
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.episodes > 0)
        .map(|(i, counts)| ConditionSummary {
            weather: Weather::ALL[i / TimeOfDay::ALL.len()],
            time_of_day: TimeOfDay::ALL[i % TimeOfDay::ALL.len()],
            detection_rate: counts.detection_rate(),
            safe_rate: counts.safe_rate(),
            counts,
        })
        .collect();
    BatchResult {
        logs,
        overall,
        summaries,
    }
}

#[derive(Serialize)]
struct TickLine<'a> {
    episode: u64,
    #[serde(flatten)]
    tick: &'a TickRecord,
}

#[derive(Serialize)]
struct TrailerLine<'a> {
    episode: u64,
    seed: u64,
    gated: bool,
    tags: &'a ConditionTags,
    outcome: Outcome,
    premature: bool,
    maneuver_distance_m: Option<f64>,
}

/// One JSON line per tick, then a trailer line with the outcome.
pub fn write_episode_jsonl<W: Write>(log: &EpisodeLog, mut out: W) -> Result<()> {
    for tick in &log.ticks {
        serde_json::to_writer(
            &mut out,
            &TickLine {
                episode: log.episode,
                tick,
            },
        )?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(
        &mut out,
        &TrailerLine {
            episode: log.episode,
            seed: log.seed,
            gated: log.gated,
            tags: &log.tags,
            outcome: log.outcome,
            premature: log.premature,
            maneuver_distance_m: log.maneuver_distance_m,
        },
    )?;
    out.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ObstacleKind;

    fn condition(time: TimeOfDay) -> EpisodeCondition {
        EpisodeCondition {
            tags: ConditionTags {
                time_of_day: time,
                weather: Weather::Clear,
                obstacle_kind: ObstacleKind::Box,
            },
            lateral_offset: 0.0,
        }
    }

    fn run(p: &dyn Perceiver) -> EpisodeLog {
        run_episode(
            p,
            None,
            false,
            &EpisodeConfig::default(),
            &condition(TimeOfDay::Day),
            0,
            7,
        )
        .unwrap()
    }

    #[test]
    fn oracle_detects_at_eight() {
        let log = run(&FnPerceiver(|s: &Sample| s.true_distance_m));
        assert_eq!(log.outcome, Outcome::DetectedInTime);
        assert!(!log.premature);
        assert_eq!(log.maneuver_distance_m, Some(8.0));
        assert_eq!(log.ticks.len(), 23);
    }

    #[test]
    fn blind_agent_collides() {
        let log = run(&FnPerceiver(|_: &Sample| 100.0));
        assert_eq!(log.outcome, Outcome::Collision);
        // 30, 29, ..., 2 are rendered; 1 m is a collision.
        assert_eq!(log.ticks.len(), 29);
        assert!(log.ticks.windows(2).all(|w| w[1].true_distance_m < w[0].true_distance_m));
    }

    #[test]
    fn biased_agent_is_premature() {
        let log = run(&FnPerceiver(|s: &Sample| s.true_distance_m - 4.0));
        assert_eq!(log.outcome, Outcome::DetectedInTime);
        assert_eq!(log.maneuver_distance_m, Some(12.0));
        assert!(log.premature);
    }

    #[test]
    fn gated_without_guard_is_an_error() {
        let r = run_episode(
            &FnPerceiver(|s: &Sample| s.true_distance_m),
            None,
            true,
            &EpisodeConfig::default(),
            &condition(TimeOfDay::Day),
            0,
            0,
        );
        assert!(matches!(r, Err(Error::Configuration(_))));
    }

    #[test]
    fn config_validation() {
        let bad = EpisodeConfig {
            trigger_m: 2.0,
            ..EpisodeConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn spec(n: usize) -> BatchSpec {
        BatchSpec {
            episodes: n,
            conditions: FactorWeights::default(),
            master_seed: 3,
            gated: false,
            config: EpisodeConfig::default(),
        }
    }

    #[test]
    fn oracle_batch_and_determinism() {
        let oracle = FnPerceiver(|s: &Sample| s.true_distance_m);
        let a = run_batch(&spec(10), &oracle, None, Some(1)).unwrap();
        assert_eq!(a.overall.detection_rate(), 1.0);
        let b = run_batch(&spec(10), &oracle, None, Some(4)).unwrap();
        assert_eq!(a, b);
        let total: usize = a.summaries.iter().map(|s| s.counts.episodes).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn night_degradation_shows_in_summaries() {
        // Blind at night, perfect by day.
        let p = FnPerceiver(|s: &Sample| {
            if s.params.time_of_day == TimeOfDay::Night {
                100.0
            } else {
                s.true_distance_m
            }
        });
        let mut sp = spec(60);
        sp.conditions.time_of_day = [1.0, 0.0, 1.0];
        let r = run_batch(&sp, &p, None, None).unwrap();
        let rate = |t: TimeOfDay| {
            let (d, n) = r
                .summaries
                .iter()
                .filter(|s| s.time_of_day == t)
                .fold((0, 0), |(d, n), s| (d + s.counts.detected, n + s.counts.episodes));
            d as f64 / n as f64
        };
        assert!(rate(TimeOfDay::Night) < rate(TimeOfDay::Day));
    }

    #[test]
    fn jsonl_has_trailer() {
        let log = run(&FnPerceiver(|s: &Sample| s.true_distance_m));
        let mut buf = Vec::new();
        write_episode_jsonl(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), log.ticks.len() + 1);
        let trailer: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
        assert_eq!(trailer["outcome"], "detected_in_time");
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["true_distance_m"], 30.0);
    }
}
