//! Pipeline configuration: a TOML file with one table per stage.
//!
//! Every stage seed defaults to `mix(seed, stage index)` of the master seed
//! and can be pinned with a `seed = ...` key inside the stage table.

use std::path::{Path, PathBuf};

use competency::agent::{AgentConfig, TrainParams, CLIP_NORM};
use competency::conditions::{BetaMode, HdpConfig};
use competency::guard::{ActionKind, MonitorConfig, PredicateMode};
use competency::metrics::CoverageConfig;
use competency::predictors::LogisticParams;
use competency::rng::mix;
use competency::scene::{FactorWeights, TimeOfDay, MAX_DISTANCE_M, MIN_DISTANCE_M};
use competency::sim::EpisodeConfig;
use competency::strategy::{KMode, StrategyOptions, DEFAULT_MISMATCH_THRESHOLD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed.
    pub seed: u64,
    pub data: DataConfig,
    pub agent: AgentSection,
    pub strategies: StrategySection,
    pub conditions: ConditionSection,
    pub predictors: PredictorSection,
    pub evaluate: EvaluateSection,
    pub simulate: SimulateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            agent: AgentSection::default(),
            strategies: StrategySection::default(),
            conditions: ConditionSection::default(),
            predictors: PredictorSection::default(),
            evaluate: EvaluateSection::default(),
            simulate: SimulateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mix {
    pub obstacle_kind: [f64; 3],
    pub weather: [f64; 4],
    pub time_of_day: [f64; 3],
    pub distance_range: [f64; 2],
}

impl Default for Mix {
    fn default() -> Self {
        Self {
            obstacle_kind: [1.0; 3],
            weather: [1.0; 4],
            time_of_day: [1.0; 3],
            distance_range: [MIN_DISTANCE_M, MAX_DISTANCE_M],
        }
    }
}

impl Mix {
    pub fn weights(&self) -> FactorWeights {
        FactorWeights {
            obstacle_kind: self.obstacle_kind,
            weather: self.weather,
            time_of_day: self.time_of_day,
            distance_range: (self.distance_range[0], self.distance_range[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    pub mix: Mix,
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 4000,
            mix: Mix::default(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub dense_units: usize,
    pub init_scale: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Zero disables gradient clipping.
    pub max_grad_norm: f64,
    /// Train only on these times of day; empty means all.
    pub train_time_of_day: Vec<TimeOfDay>,
    pub seed: Option<u64>,
}

impl Default for AgentSection {
    fn default() -> Self {
        let arch = AgentConfig::default();
        let hp = TrainParams::default();
        Self {
            conv1_filters: arch.conv1_filters,
            conv2_filters: arch.conv2_filters,
            dense_units: arch.dense_units,
            init_scale: arch.init_scale,
            learning_rate: hp.learning_rate,
            momentum: hp.momentum,
            epochs: hp.epochs,
            batch_size: hp.batch_size,
            max_grad_norm: CLIP_NORM,
            train_time_of_day: Vec::new(),
            seed: None,
        }
    }
}

/// `k = "auto"` or `k = <count>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSetting {
    Fixed(usize),
    Named(String),
}

impl KSetting {
    pub fn mode(&self) -> CliResult<KMode> {
        match self {
            KSetting::Fixed(k) => Ok(KMode::Fixed(*k)),
            KSetting::Named(s) if s == "auto" => Ok(KMode::Auto),
            KSetting::Named(s) => Err(CliError::Validation(format!(
                "strategies.k must be \"auto\" or a count, got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub k: KSetting,
    pub restarts: usize,
    pub standardize: bool,
    pub seed: Option<u64>,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            k: KSetting::Named("auto".into()),
            restarts: 10,
            standardize: true,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionSection {
    pub visual_words: usize,
    pub topics: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub eta: f64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub beta_mode: BetaMode,
    pub fold_in_sweeps: usize,
    pub fold_in_average: usize,
    pub novelty_percentile: f64,
    pub seed: Option<u64>,
}

impl Default for ConditionSection {
    fn default() -> Self {
        let hdp = HdpConfig::default();
        Self {
            visual_words: 64,
            topics: hdp.topics,
            gamma: hdp.gamma,
            alpha: hdp.alpha,
            eta: hdp.eta,
            sweeps: hdp.sweeps,
            burn_in: hdp.burn_in,
            beta_mode: hdp.beta_mode,
            fold_in_sweeps: hdp.fold_in_sweeps,
            fold_in_average: hdp.fold_in_average,
            novelty_percentile: hdp.novelty_percentile,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub cells: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Every n-th train sample (by train position, n-1 mod n) is held out
    /// for calibration.
    pub calibration_every: usize,
    pub seed: Option<u64>,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let lp = LogisticParams::default();
        Self {
            cells: 16,
            epochs: lp.epochs,
            learning_rate: lp.learning_rate,
            l2: lp.l2,
            calibration_every: 4,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub credible_mass: f64,
    pub spread_threshold_m: f64,
    pub permutations: usize,
    pub p_value: f64,
    pub probe_accuracy: f64,
    pub seed: Option<u64>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        let cov = CoverageConfig::default();
        Self {
            credible_mass: 0.95,
            spread_threshold_m: cov.spread_threshold_m,
            permutations: cov.permutations,
            p_value: cov.p_value,
            probe_accuracy: cov.probe_accuracy,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub episodes: usize,
    pub gated: bool,
    pub mix: Mix,
    /// Inline requirements, used when `requirements_path` is unset.
    pub requirements: Vec<String>,
    /// Relative paths resolve against the config file's directory.
    pub requirements_path: Option<PathBuf>,
    pub policy: Vec<ActionKind>,
    pub mismatch_threshold: f64,
    pub predicate_mode: PredicateMode,
    pub initial_distance_m: f64,
    pub speed_mps: f64,
    pub tick_s: f64,
    pub trigger_m: f64,
    pub margin_m: f64,
    pub premature_m: f64,
    pub seed: Option<u64>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let ep = EpisodeConfig::default();
        Self {
            episodes: 200,
            gated: true,
            mix: Mix::default(),
            requirements: vec![
                "WHEN time=day AND weather=clear REQUIRE DETECT_WITHIN 8 M RATE >= 0.99".into(),
                "WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 0.9".into(),
            ],
            requirements_path: None,
            policy: MonitorConfig::default().policy,
            mismatch_threshold: DEFAULT_MISMATCH_THRESHOLD,
            predicate_mode: PredicateMode::GroundTruth,
            initial_distance_m: ep.initial_distance_m,
            speed_mps: ep.speed_mps,
            tick_s: ep.tick_s,
            trigger_m: ep.trigger_m,
            margin_m: ep.margin_m,
            premature_m: ep.premature_m,
            seed: None,
        }
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    Strategies,
    Conditions,
    Predictors,
    Evaluate,
    Simulate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::Train,
        Stage::Strategies,
        Stage::Conditions,
        Stage::Predictors,
        Stage::Evaluate,
        Stage::Simulate,
        Stage::Report,
    ];

    /// The subcommand name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Strategies => "strategies",
            Stage::Conditions => "conditions",
            Stage::Predictors => "predictors",
            Stage::Evaluate => "evaluate",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        }
    }

    fn index(self) -> u64 {
        Stage::ALL.iter().position(|s| *s == self).unwrap() as u64
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Loads a config file; a relative `requirements_path` is rebased onto
    /// the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(req), Some(dir)) = (&cfg.simulate.requirements_path, path.parent()) {
            if req.is_relative() {
                cfg.simulate.requirements_path = Some(dir.join(req));
            }
        }
        Ok(cfg)
    }

    /// Fails for seeds above `i64::MAX`, which TOML cannot hold.
    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let pinned = match stage {
            Stage::GenData => self.data.seed,
            Stage::Train => self.agent.seed,
            Stage::Strategies => self.strategies.seed,
            Stage::Conditions => self.conditions.seed,
            Stage::Predictors => self.predictors.seed,
            Stage::Evaluate => self.evaluate.seed,
            Stage::Simulate => self.simulate.seed,
            Stage::Report => None,
        };
        pinned.unwrap_or_else(|| mix(self.seed, stage.index()))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        self.data.mix.weights().validate().map_err(|e| CliError::Validation(format!("data.mix: {e}")))?;
        self.simulate
            .mix
            .weights()
            .validate()
            .map_err(|e| CliError::Validation(format!("simulate.mix: {e}")))?;
        if self.data.samples < 2 || self.data.samples % 2 == 1 {
            return bad(format!("data.samples must be even and at least 2, got {}", self.data.samples));
        }
        self.agent_config().shapes().map_err(|e| CliError::Validation(format!("agent: {e}")))?;
        if self.agent.batch_size == 0 || self.agent.epochs == 0 {
            return bad("agent.batch_size and agent.epochs must be positive".into());
        }
        if !(self.agent.learning_rate > 0.0) || !(0.0..1.0).contains(&self.agent.momentum) {
            return bad("agent.learning_rate must be positive and agent.momentum in [0, 1)".into());
        }
        if self.agent.max_grad_norm < 0.0 {
            return bad("agent.max_grad_norm must be nonnegative".into());
        }
        self.strategies.k.mode()?;
        if self.strategies.restarts == 0 {
            return bad("strategies.restarts must be positive".into());
        }
        if self.conditions.visual_words < 2 {
            return bad("conditions.visual_words must be at least 2".into());
        }
        self.hdp_config(0).validate().map_err(|e| CliError::Validation(format!("conditions: {e}")))?;
        if self.predictors.cells == 0 || self.predictors.calibration_every < 2 {
            return bad("predictors.cells must be positive and calibration_every at least 2".into());
        }
        if !(self.evaluate.credible_mass > 0.0 && self.evaluate.credible_mass <= 1.0) {
            return bad("evaluate.credible_mass must lie in (0, 1]".into());
        }
        if self.simulate.episodes == 0 {
            return bad("simulate.episodes must be positive".into());
        }
        self.episode_config()
            .validate()
            .map_err(|e| CliError::Validation(format!("simulate: {e}")))?;
        self.monitor_config()
            .validate()
            .map_err(|e| CliError::Validation(format!("simulate: {e}")))?;
        Ok(())
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            conv1_filters: self.agent.conv1_filters,
            conv2_filters: self.agent.conv2_filters,
            dense_units: self.agent.dense_units,
            init_scale: self.agent.init_scale,
            init_seed: mix(self.stage_seed(Stage::Train), 0),
            ..AgentConfig::default()
        }
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            learning_rate: self.agent.learning_rate,
            momentum: self.agent.momentum,
            epochs: self.agent.epochs,
            batch_size: self.agent.batch_size,
            shuffle_seed: mix(self.stage_seed(Stage::Train), 1),
            max_grad_norm: (self.agent.max_grad_norm > 0.0).then_some(self.agent.max_grad_norm),
        }
    }

    pub fn strategy_options(&self) -> StrategyOptions {
        StrategyOptions {
            seed: self.stage_seed(Stage::Strategies),
            restarts: self.strategies.restarts,
            standardize: self.strategies.standardize,
        }
    }

    pub fn codebook_seed(&self) -> u64 {
        mix(self.stage_seed(Stage::Conditions), 0)
    }

    pub fn hdp_config(&self, seed: u64) -> HdpConfig {
        let c = &self.conditions;
        HdpConfig {
            topics: c.topics,
            gamma: c.gamma,
            alpha: c.alpha,
            eta: c.eta,
            sweeps: c.sweeps,
            burn_in: c.burn_in,
            seed,
            beta_mode: c.beta_mode,
            fold_in_sweeps: c.fold_in_sweeps,
            fold_in_average: c.fold_in_average,
            novelty_percentile: c.novelty_percentile,
        }
    }

    pub fn logistic_params(&self) -> LogisticParams {
        LogisticParams {
            epochs: self.predictors.epochs,
            learning_rate: self.predictors.learning_rate,
            l2: self.predictors.l2,
        }
    }

    pub fn coverage_config(&self) -> CoverageConfig {
        CoverageConfig {
            spread_threshold_m: self.evaluate.spread_threshold_m,
            permutations: self.evaluate.permutations,
            p_value: self.evaluate.p_value,
            probe_accuracy: self.evaluate.probe_accuracy,
            seed: self.stage_seed(Stage::Evaluate),
            ..CoverageConfig::default()
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        let s = &self.simulate;
        EpisodeConfig {
            initial_distance_m: s.initial_distance_m,
            speed_mps: s.speed_mps,
            tick_s: s.tick_s,
            trigger_m: s.trigger_m,
            margin_m: s.margin_m,
            premature_m: s.premature_m,
        }
    }

    pub fn monitor_config(&self) -> MonitorConfig {
        MonitorConfig {
            policy: self.simulate.policy.clone(),
            mismatch_threshold: self.simulate.mismatch_threshold,
            predicate_mode: self.simulate.predicate_mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn toml_roundtrip_keeps_hash() {
        let mut cfg = PipelineConfig::default();
        cfg.strategies.k = KSetting::Fixed(3);
        cfg.agent.train_time_of_day = vec![TimeOfDay::Day];
        cfg.simulate.requirements_path = Some("reqs.txt".into());
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn sections_and_seeds() {
        let cfg = PipelineConfig::from_toml_str(
            "seed = 9\n[data]\nsamples = 100\n[strategies]\nk = 2\nseed = 5\n[simulate.mix]\ntime_of_day = [0.0, 0.0, 1.0]\n",
        )
        .unwrap();
        assert_eq!(cfg.data.samples, 100);
        assert_eq!(cfg.strategies.k.mode().unwrap(), KMode::Fixed(2));
        assert_eq!(cfg.stage_seed(Stage::Strategies), 5);
        assert_eq!(cfg.stage_seed(Stage::Train), mix(9, 1));
        assert_eq!(cfg.simulate.mix.time_of_day, [0.0, 0.0, 1.0]);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::from_toml_str("[data]\nsample = 10\n").is_err());
        let cfg = PipelineConfig::from_toml_str("[strategies]\nk = \"many\"\n").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Validation(_))));
        let cfg = PipelineConfig::from_toml_str("[data]\nsamples = 7\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
