//! Pipeline stages. Each reads declared upstream artifacts from the working
//! directory, writes its own, and records a manifest.

mod assess;
mod learn;
mod report;

use std::path::{Path, PathBuf};

use competency::agent::{Agent, TrainReport};
use competency::conditions::{ConditionModel, ConditionVector, Tokenizer};
use competency::guard::{parse_requirement, parse_requirements, Requirement, TagProbe};
use competency::metrics::{CoverageReport, FidelityScore, ReliabilityResult};
use competency::predictors::{ErrorBand, PerformancePredictor, StrategyPredictor};
use competency::scene::{read_dataset, Dataset, FactorWeights, TimeOfDay, Weather};
use competency::sim::{ConditionSummary, OutcomeCounts};
use competency::strategy::{AffinityTable, StrategyModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{now_unix, sha256_file, Artifact, Manifest, Workdir, ARTIFACT_VERSION};
use crate::config::{PipelineConfig, Stage};
use crate::error::{CliError, CliResult};

pub use report::verify_provenance;

/// Everything a stage needs: where artifacts live and how to build them.
#[derive(Debug, Clone)]
pub struct Context {
    pub workdir: Workdir,
    pub config: PipelineConfig,
    pub config_hash: String,
    /// Thread count for parallel stages; outputs do not depend on it.
    pub workers: Option<usize>,
}

impl Context {
    pub fn new(workdir: impl Into<PathBuf>, config: PipelineConfig, workers: Option<usize>) -> CliResult<Self> {
        config.validate()?;
        if workers == Some(0) {
            return Err(CliError::Validation("--workers must be positive".into()));
        }
        Ok(Self {
            workdir: Workdir::new(workdir)?,
            config_hash: config.hash(),
            config,
            workers,
        })
    }
}

/// What a stage read and wrote.
#[derive(Debug, Clone, Default)]
pub struct StageFiles {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

/// Runs one stage under the working-directory lock and writes its manifest.
pub fn run_stage(ctx: &Context, stage: Stage) -> CliResult<Manifest> {
    let _lock = ctx.workdir.lock()?;
    log::info!("stage {} (config {})", stage.name(), &ctx.config_hash[..12]);
    let run = || -> CliResult<StageFiles> {
        match stage {
            Stage::GenData => learn::gen_data(ctx),
            Stage::Train => learn::train(ctx),
            Stage::Strategies => learn::strategies(ctx),
            Stage::Conditions => learn::conditions(ctx),
            Stage::Predictors => learn::predictors(ctx),
            Stage::Evaluate => assess::evaluate(ctx),
            Stage::Simulate => assess::simulate(ctx),
            Stage::Report => report::report(ctx),
        }
    };
    let files = match ctx.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Internal(format!("worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let manifest = Manifest {
        stage: manifest_name(ctx, stage),
        version: ARTIFACT_VERSION,
        config_hash: ctx.config_hash.clone(),
        seed: ctx.config.stage_seed(stage),
        inputs: ctx.workdir.hashes(&files.inputs)?,
        outputs: ctx.workdir.hashes(&files.outputs)?,
        created_unix: now_unix(),
    };
    ctx.workdir.write_manifest(&manifest)?;
    Ok(manifest)
}

/// Runs every stage in order.
pub fn run_pipeline(ctx: &Context) -> CliResult<Vec<Manifest>> {
    Stage::ALL.iter().map(|s| run_stage(ctx, *s)).collect()
}

/// Simulation manifests are per mode so gated and ungated runs coexist.
fn manifest_name(ctx: &Context, stage: Stage) -> String {
    match stage {
        Stage::Simulate if ctx.config.simulate.gated => "simulate-gated".into(),
        Stage::Simulate => "simulate-ungated".into(),
        s => s.name().into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub samples: usize,
    pub master_seed: u64,
    pub weights: FactorWeights,
    pub body_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentArtifact {
    pub agent: Agent,
    pub report: TrainReport,
    /// Empty when trained on every time of day.
    pub train_time_of_day: Vec<TimeOfDay>,
}

/// Agent output for one dataset sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub estimate_m: f64,
    pub strategy: usize,
    /// Standardized distance to the assigned centroid.
    pub centroid_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorAffinity {
    pub factor: String,
    pub table: AffinityTable<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategiesArtifact {
    pub model: StrategyModel,
    /// One entry per dataset sample, in dataset order.
    pub samples: Vec<SampleOutput>,
    pub affinity: Vec<FactorAffinity>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionsArtifact {
    pub tokenizer: Tokenizer,
    pub model: ConditionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorsArtifact {
    pub strategy: StrategyPredictor,
    pub performance: PerformancePredictor,
    pub probe: TagProbe,
    pub fit_samples: usize,
    pub calibration_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltySummary {
    pub threshold: f64,
    pub train_flag_rate: f64,
    pub assess_flag_rate: f64,
    /// Assess images with luminance inverted.
    pub inverted_flag_rate: f64,
}

/// Competency estimate and outcome for one assess sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessRecord {
    pub sample: usize,
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
    pub true_distance_m: f64,
    pub estimate_m: f64,
    pub observed_strategy: usize,
    pub strategy_distribution: Vec<f64>,
    pub band: ErrorBand,
    pub in_band_probability: f64,
    pub in_band: bool,
    pub novelty_score: f64,
    pub novelty_flag: bool,
    pub inverted_novelty_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    pub strategies: usize,
    pub assess_mse: f64,
    pub label_variance: f64,
    pub credible_mass: f64,
    pub correctness_point: f64,
    pub correctness_distribution: f64,
    pub fidelity_fine: FidelityScore,
    pub fidelity_coarse: FidelityScore,
    pub coverage: CoverageReport,
    pub novelty: NoveltySummary,
    pub records: Vec<AssessRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationArtifact {
    pub gated: bool,
    pub requirements: Vec<String>,
    pub overall: OutcomeCounts,
    pub summaries: Vec<ConditionSummary>,
    pub reliability: Vec<ReliabilityResult>,
    /// Episodes whose largest per-tick miss probability exceeded 0.01.
    pub at_risk_episodes: usize,
    /// Of those, episodes where the monitor issued a fallback.
    pub at_risk_with_fallback: usize,
}

pub(crate) fn load_dataset(wd: &Workdir) -> CliResult<(Dataset, Vec<PathBuf>)> {
    let meta = wd.read_json::<DatasetMeta>(Artifact::Dataset)?.payload;
    let bin = wd.require(Artifact::DatasetBin)?;
    if sha256_file(&bin)? != meta.body_sha256 {
        return Err(CliError::Validation(format!(
            "{} does not match the hash recorded in {}; rerun `competency gen-data`",
            bin.display(),
            Artifact::Dataset.file_name()
        )));
    }
    let bytes = std::fs::read(&bin).map_err(|e| CliError::io(format!("reading {}", bin.display()), e))?;
    let ds = read_dataset(bytes.as_slice(), meta.master_seed, meta.weights)?;
    if ds.len() != meta.samples {
        return Err(CliError::Validation(format!(
            "dataset holds {} samples, metadata says {}",
            ds.len(),
            meta.samples
        )));
    }
    Ok((ds, vec![wd.path(Artifact::Dataset), bin]))
}

/// Requirements from `requirements_path` when set, else the inline list.
pub(crate) fn load_requirements(cfg: &PipelineConfig) -> CliResult<(Vec<Requirement>, Option<PathBuf>)> {
    match &cfg.simulate.requirements_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Validation(format!("cannot read requirements {}: {e}", path.display()))
            })?;
            let reqs = parse_requirements(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            Ok((reqs, Some(path.clone())))
        }
        None => {
            let reqs = cfg
                .simulate
                .requirements
                .iter()
                .map(|r| parse_requirement(r).map_err(|e| CliError::Validation(format!("requirement `{r}`: {e}"))))
                .collect::<CliResult<_>>()?;
            Ok((reqs, None))
        }
    }
}

/// Visual-only fold-in θ for the given samples, in parallel.
pub(crate) fn visual_thetas(
    conditions: &ConditionsArtifact,
    ds: &Dataset,
    indices: &[usize],
) -> CliResult<Vec<ConditionVector>> {
    indices
        .par_iter()
        .map(|i| {
            let doc = conditions.tokenizer.tokenize(*i as u64, &ds.samples[*i].image, None)?;
            Ok(conditions.model.infer(&doc)?)
        })
        .collect()
}

/// Train positions held out for calibration.
pub(crate) fn calibration_mask(train_len: usize, every: usize) -> Vec<bool> {
    (0..train_len).map(|j| j % every == every - 1).collect()
}

pub(crate) fn display(path: &Path) -> String {
    path.display().to_string()
}
