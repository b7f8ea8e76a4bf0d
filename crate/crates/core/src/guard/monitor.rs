use std::fmt;

use serde::{Deserialize, Serialize};

use super::requirement::{ConditionTags, Requirement};
use crate::conditions::ConditionVector;
use crate::error::{Error, Result};
use crate::predictors::{CompetencyEstimate, CompetencyModels, ErrorBand, LogisticParams, SoftmaxRegression};
use crate::scene::{ObstacleKind, TimeOfDay, Weather};
use crate::stats::{argmax, normal_cdf};
use crate::strategy::{strategy_mismatch, StrategyModel, DEFAULT_MISMATCH_THRESHOLD};

/// `2 · z(0.9)`: width of the central 80% interval of a unit normal.
pub const BAND_TO_SIGMA: f64 = 2.5631;
pub const SIGMA_FLOOR_M: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Proceed,
    ReduceSpeed,
    PreemptiveManeuver,
    Handoff,
}

impl ActionKind {
    pub fn label(self) -> &'static str {
        match self {
            ActionKind::Proceed => "proceed",
            ActionKind::ReduceSpeed => "reduce speed",
            ActionKind::PreemptiveManeuver => "pre-emptive maneuver",
            ActionKind::Handoff => "hand off to operator",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionReason {
    /// Canonical text of the requirement at risk; `None` for Proceed.
    pub requirement: Option<String>,
    pub p_miss: f64,
    pub novelty: bool,
    pub strategy_mismatch: bool,
    pub corrupt_band: bool,
    pub dominant_topic: Option<usize>,
    /// Leading tokens of the dominant topic.
    pub topic_terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub reason: ActionReason,
}

/// Probability that the true distance is within `threshold_m` although the
/// estimate says otherwise, under a normal error model fitted to the band.
pub fn p_miss(estimate_m: f64, band: &ErrorBand, threshold_m: f64) -> f64 {
    if estimate_m <= threshold_m {
        return 0.0;
    }
    let sigma = ((band.q90 - band.q10) / BAND_TO_SIGMA).max(SIGMA_FLOOR_M);
    normal_cdf((threshold_m - (estimate_m - band.mean)) / sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateMode {
    /// Requirement predicates see the true episode tags.
    GroundTruth,
    /// Tags are inferred from θ by [`TagProbe`].
    Probe,
}

/// Multinomial probes from θ to each condition tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagProbe {
    pub time_of_day: SoftmaxRegression,
    pub weather: SoftmaxRegression,
    pub obstacle_kind: SoftmaxRegression,
}

pub const PROBE_PARAMS: LogisticParams = LogisticParams {
    epochs: 1000,
    learning_rate: 1.0,
    l2: 1e-3,
};

impl TagProbe {
    pub fn fit(thetas: &[ConditionVector], tags: &[ConditionTags]) -> Result<Self> {
        let fit = |labels: Vec<usize>, classes| {
            SoftmaxRegression::fit(thetas, &labels, classes, &PROBE_PARAMS)
        };
        Ok(Self {
            time_of_day: fit(
                tags.iter().map(|t| t.time_of_day.index()).collect(),
                TimeOfDay::ALL.len(),
            )?,
            weather: fit(tags.iter().map(|t| t.weather.index()).collect(), Weather::ALL.len())?,
            obstacle_kind: fit(
                tags.iter().map(|t| t.obstacle_kind.index()).collect(),
                ObstacleKind::ALL.len(),
            )?,
        })
    }

    pub fn predict(&self, theta: &ConditionVector) -> Result<ConditionTags> {
        let pick = |m: &SoftmaxRegression| m.predict(&theta.theta).map(|p| argmax(&p));
        Ok(ConditionTags {
            time_of_day: TimeOfDay::ALL[pick(&self.time_of_day)?],
            weather: Weather::ALL[pick(&self.weather)?],
            obstacle_kind: ObstacleKind::ALL[pick(&self.obstacle_kind)?],
        })
    }
}

/// Fitted models the monitor consults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuardModels {
    pub competency: CompetencyModels,
    pub strategies: StrategyModel,
    pub probe: Option<TagProbe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// Fallbacks in order of use; each at most once per episode.
    pub policy: Vec<ActionKind>,
    pub mismatch_threshold: f64,
    pub predicate_mode: PredicateMode,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            policy: vec![
                ActionKind::ReduceSpeed,
                ActionKind::PreemptiveManeuver,
                ActionKind::Handoff,
            ],
            mismatch_threshold: DEFAULT_MISMATCH_THRESHOLD,
            predicate_mode: PredicateMode::GroundTruth,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.policy.last() != Some(&ActionKind::Handoff) {
            return Err(Error::Configuration("fallback policy must end with handoff".into()));
        }
        if self.policy.contains(&ActionKind::Proceed) {
            return Err(Error::Configuration("proceed is not a fallback".into()));
        }
        let mut seen = self.policy.clone();
        seen.sort_by_key(|k| *k as u8);
        seen.dedup();
        if seen.len() != self.policy.len() {
            return Err(Error::Configuration("fallback listed twice".into()));
        }
        Ok(())
    }
}

/// Per-tick monitor inputs besides the competency estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub estimate_m: f64,
    /// Strategy the agent actually executed, if its trace was available.
    pub observed_strategy: Option<usize>,
    pub tags: ConditionTags,
}

/// Per-episode monitor: remembers which fallbacks were consumed.
#[derive(Debug, Clone)]
pub struct Monitor<'a> {
    requirements: &'a [Requirement],
    config: &'a MonitorConfig,
    probe: Option<&'a TagProbe>,
    used: Vec<bool>,
}

impl<'a> Monitor<'a> {
    pub fn new(
        requirements: &'a [Requirement],
        config: &'a MonitorConfig,
        probe: Option<&'a TagProbe>,
    ) -> Result<Self> {
        config.validate()?;
        if config.predicate_mode == PredicateMode::Probe && probe.is_none() {
            return Err(Error::Configuration("probe predicate mode needs a fitted tag probe".into()));
        }
        Ok(Self {
            requirements,
            config,
            probe,
            used: vec![false; config.policy.len()],
        })
    }

    fn next_fallback(&mut self) -> ActionKind {
        match self.used.iter().position(|u| !u) {
            Some(i) => {
                self.used[i] = true;
                self.config.policy[i]
            }
            None => ActionKind::Handoff,
        }
    }

    /// Decides this tick's action. `topic_terms` labels the dominant topic
    /// for the explanation.
    pub fn step(
        &mut self,
        obs: &Observation,
        competency: &CompetencyEstimate,
        topic_terms: Vec<String>,
    ) -> Result<Action> {
        let tags = match self.config.predicate_mode {
            PredicateMode::GroundTruth => obs.tags,
            PredicateMode::Probe => self.probe.expect("checked at construction").predict(&competency.theta)?,
        };
        let mismatch = match obs.observed_strategy {
            Some(s) => strategy_mismatch(
                &competency.strategy_distribution,
                s,
                self.config.mismatch_threshold,
            )?,
            None => false,
        };
        let novelty = competency.novelty.flag;
        let band = competency.error_band;
        let mut reason = ActionReason {
            requirement: None,
            p_miss: 0.0,
            novelty,
            strategy_mismatch: mismatch,
            corrupt_band: false,
            dominant_topic: Some(competency.theta.dominant_topic()),
            topic_terms,
        };
        let matching: Vec<&Requirement> =
            self.requirements.iter().filter(|r| r.matches(&tags)).collect();
        if band.q90 < band.q10 || !(band.q10.is_finite() && band.q90.is_finite()) {
            reason.corrupt_band = true;
            reason.requirement = matching
                .first()
                .or(self.requirements.first().as_ref())
                .map(|r| r.to_string());
            reason.p_miss = f64::NAN;
            return Ok(Action {
                kind: ActionKind::Handoff,
                reason,
            });
        }
        for req in &matching {
            let p = p_miss(obs.estimate_m, &band, req.threshold_m);
            reason.p_miss = reason.p_miss.max(p);
            if p > 1.0 - req.min_rate || novelty || mismatch {
                reason.p_miss = p;
                reason.requirement = Some(req.to_string());
                return Ok(Action {
                    kind: self.next_fallback(),
                    reason,
                });
            }
        }
        Ok(Action {
            kind: ActionKind::Proceed,
            reason,
        })
    }
}

/// Runs the competency models on one image and steps the monitor.
pub fn monitor_step(
    monitor: &mut Monitor<'_>,
    models: &GuardModels,
    image: &crate::scene::Image,
    trace: Option<&[f64]>,
    estimate_m: f64,
    tags: ConditionTags,
) -> Result<(Action, CompetencyEstimate)> {
    let competency = models.competency.estimate(image)?;
    let observed_strategy = match trace {
        Some(t) => Some(models.strategies.assign(t)?.0),
        None => None,
    };
    let topic = competency.theta.dominant_topic();
    let terms = models
        .competency
        .conditions
        .describe_topic(topic)
        .map(|terms| terms.iter().take(3).map(|t| t.label.to_string()).collect())
        .unwrap_or_default();
    let obs = Observation {
        estimate_m,
        observed_strategy,
        tags,
    };
    let action = monitor.step(&obs, &competency, terms)?;
    Ok((action, competency))
}

/// One-paragraph operator explanation with fixed wording.
pub fn explain(action: &Action) -> String {
    let r = &action.reason;
    let topic = match r.dominant_topic {
        Some(t) if r.topic_terms.is_empty() => format!(" Dominant conditions: topic {t}."),
        Some(t) => format!(" Dominant conditions: topic {t} ({}).", r.topic_terms.join(", ")),
        None => String::new(),
    };
    let requirement = r.requirement.as_deref().unwrap_or("none");
    if action.kind == ActionKind::Proceed {
        return format!("No active requirement at risk.{topic}");
    }
    if r.corrupt_band {
        return format!(
            "Action: {}. The predicted performance band is corrupt (q90 below q10), so the monitor fails closed. Requirement: {requirement}.{topic}",
            action.kind
        );
    }
    let mut causes = vec![format!("estimated miss probability {:.3}", r.p_miss)];
    if r.novelty {
        causes.push("input flagged as novel".into());
    }
    if r.strategy_mismatch {
        causes.push("executed strategy unexpected for these conditions".into());
    }
    format!(
        "Action: {}. Requirement at risk: {requirement}; {}.{topic}",
        action.kind,
        causes.join("; ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::NoveltyScore;
    use crate::guard::parse_requirement;

    fn estimate(band: ErrorBand, novel: bool, dist: Vec<f64>) -> CompetencyEstimate {
        CompetencyEstimate {
            theta: ConditionVector {
                theta: vec![0.1, 0.9],
            },
            novelty: NoveltyScore {
                score: -2.0,
                threshold: -3.0,
                flag: novel,
            },
            strategy_distribution: dist,
            error_band: band,
            cell: 0,
            in_band_probability: 0.8,
        }
    }

    fn tags() -> ConditionTags {
        ConditionTags {
            time_of_day: TimeOfDay::Day,
            weather: Weather::Clear,
            obstacle_kind: ObstacleKind::Box,
        }
    }

    fn obs(estimate_m: f64) -> Observation {
        Observation {
            estimate_m,
            observed_strategy: None,
            tags: tags(),
        }
    }

    fn band(q10: f64, q90: f64, mean: f64) -> ErrorBand {
        ErrorBand { q10, q90, mean }
    }

    #[test]
    fn p_miss_hand_values() {
        // Narrow band far from the threshold: the normal tail vanishes.
        assert!(p_miss(20.0, &band(-0.5, 0.5, 0.0), 8.0) < 1e-12);
        let sigma_two = band(-BAND_TO_SIGMA, BAND_TO_SIGMA, 0.0);
        assert!((p_miss(8.1, &sigma_two, 8.0) - 0.4800612).abs() < 1e-6);
        assert_eq!(p_miss(7.9, &sigma_two, 8.0), 0.0);
        // Degenerate band uses the floor.
        let p = p_miss(8.05, &band(0.0, 0.0, 0.0), 8.0);
        assert!((p - normal_cdf(-1.0)).abs() < 1e-12);
    }

    #[test]
    fn fallback_sequence() {
        let reqs = vec![parse_requirement("WHEN sunny REQUIRE DETECT_WITHIN 8 M RATE >= 0.99").unwrap()];
        let cfg = MonitorConfig::default();
        let mut m = Monitor::new(&reqs, &cfg, None).unwrap();
        let risky = estimate(band(-BAND_TO_SIGMA, BAND_TO_SIGMA, 0.0), false, vec![1.0]);
        let safe = estimate(band(-0.5, 0.5, 0.0), false, vec![1.0]);
        let a = m.step(&obs(20.0), &safe, vec![]).unwrap();
        assert_eq!(a.kind, ActionKind::Proceed);
        assert!(a.reason.requirement.is_none());
        let kinds: Vec<ActionKind> = (0..4)
            .map(|_| m.step(&obs(8.1), &risky, vec![]).unwrap().kind)
            .collect();
        assert_eq!(
            kinds,
            vec![
                ActionKind::ReduceSpeed,
                ActionKind::PreemptiveManeuver,
                ActionKind::Handoff,
                ActionKind::Handoff
            ]
        );
        let a = Monitor::new(&reqs, &cfg, None).unwrap().step(&obs(8.1), &risky, vec![]).unwrap();
        assert_eq!(a.reason.requirement.as_deref(), Some(reqs[0].to_string().as_str()));
        assert!((a.reason.p_miss - 0.4800612).abs() < 1e-6);
        // Below threshold the agent is already maneuvering.
        let a = Monitor::new(&reqs, &cfg, None).unwrap().step(&obs(7.0), &risky, vec![]).unwrap();
        assert_eq!(a.kind, ActionKind::Proceed);
    }

    #[test]
    fn unmatched_requirement_proceeds() {
        let reqs = vec![parse_requirement("WHEN night REQUIRE DETECT_WITHIN 8 M RATE >= 0.99").unwrap()];
        let cfg = MonitorConfig::default();
        let mut m = Monitor::new(&reqs, &cfg, None).unwrap();
        let risky = estimate(band(-3.0, 3.0, 0.0), true, vec![1.0]);
        assert_eq!(m.step(&obs(8.1), &risky, vec![]).unwrap().kind, ActionKind::Proceed);
    }

    #[test]
    fn novelty_and_mismatch_trigger() {
        let reqs = vec![parse_requirement("WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 0.5").unwrap()];
        let cfg = MonitorConfig::default();
        let quiet = band(-0.1, 0.1, 0.0);
        let a = Monitor::new(&reqs, &cfg, None)
            .unwrap()
            .step(&obs(25.0), &estimate(quiet, true, vec![1.0]), vec![])
            .unwrap();
        assert_eq!(a.kind, ActionKind::ReduceSpeed);
        assert!(a.reason.novelty);
        let mut o = obs(25.0);
        o.observed_strategy = Some(1);
        let a = Monitor::new(&reqs, &cfg, None)
            .unwrap()
            .step(&o, &estimate(quiet, false, vec![0.99, 0.01]), vec![])
            .unwrap();
        assert!(a.reason.strategy_mismatch);
        assert_eq!(a.kind, ActionKind::ReduceSpeed);
    }

    #[test]
    fn corrupt_band_fails_closed() {
        let reqs = vec![parse_requirement("WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 0.9").unwrap()];
        let cfg = MonitorConfig::default();
        let a = Monitor::new(&reqs, &cfg, None)
            .unwrap()
            .step(&obs(25.0), &estimate(band(1.0, -1.0, 0.0), false, vec![1.0]), vec![])
            .unwrap();
        assert_eq!(a.kind, ActionKind::Handoff);
        assert!(a.reason.corrupt_band);
        assert!(explain(&a).contains("corrupt"));
    }

    #[test]
    fn explanations() {
        let reqs = vec![parse_requirement("WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 0.99").unwrap()];
        let cfg = MonitorConfig::default();
        let terms = vec!["word3[lum=0.04,dx=0.02,dy=0.01]".to_string(), "perf=hi".to_string()];
        let safe = estimate(band(-0.5, 0.5, 0.0), false, vec![1.0]);
        let a = Monitor::new(&reqs, &cfg, None)
            .unwrap()
            .step(&obs(20.0), &safe, terms.clone())
            .unwrap();
        assert_eq!(
            explain(&a),
            "No active requirement at risk. Dominant conditions: topic 1 (word3[lum=0.04,dx=0.02,dy=0.01], perf=hi)."
        );
        let risky = estimate(band(-BAND_TO_SIGMA, BAND_TO_SIGMA, 0.0), false, vec![1.0]);
        let a = Monitor::new(&reqs, &cfg, None)
            .unwrap()
            .step(&obs(8.1), &risky, terms)
            .unwrap();
        assert_eq!(
            explain(&a),
            "Action: reduce speed. Requirement at risk: WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 0.99; estimated miss probability 0.480. Dominant conditions: topic 1 (word3[lum=0.04,dx=0.02,dy=0.01], perf=hi)."
        );
    }

    #[test]
    fn policy_validation() {
        let mut cfg = MonitorConfig::default();
        cfg.policy = vec![ActionKind::Handoff, ActionKind::ReduceSpeed];
        assert!(Monitor::new(&[], &cfg, None).is_err());
        let probe_cfg = MonitorConfig {
            predicate_mode: PredicateMode::Probe,
            ..MonitorConfig::default()
        };
        assert!(Monitor::new(&[], &probe_cfg, None).is_err());
    }
}
