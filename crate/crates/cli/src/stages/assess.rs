use std::io::Write;

use competency::guard::{ActionKind, GuardModels};
use competency::metrics::{
    compute_correctness, compute_coverage, compute_fidelity, compute_reliability, scene_factors, BandRecord,
    CorrectnessMode, FidelityMode,
};
use competency::predictors::CompetencyModels;
use competency::scene::{SceneParams, Split};
use competency::sim::{run_batch, write_episode_jsonl, BatchSpec, Guard};
use competency::stats::{mean, variance};

use super::learn::check_alignment;
use super::*;
use crate::artifact::write_atomic;

/// Miss probability above which an episode counts as at risk.
pub const AT_RISK_P_MISS: f64 = 0.01;

pub(super) fn evaluate(ctx: &Context) -> CliResult<StageFiles> {
    let cfg = &ctx.config;
    let wd = &ctx.workdir;
    let (ds, mut inputs) = load_dataset(wd)?;
    let strat = wd.read_json::<StrategiesArtifact>(Artifact::Strategies)?.payload;
    let conditions = wd.read_json::<ConditionsArtifact>(Artifact::Conditions)?.payload;
    let predictors = wd.read_json::<PredictorsArtifact>(Artifact::Predictors)?.payload;
    for a in [Artifact::Strategies, Artifact::Conditions, Artifact::Predictors] {
        inputs.push(wd.path(a));
    }
    check_alignment(&ds, &strat)?;
    let model = &conditions.model;
    let tokenizer = &conditions.tokenizer;

    let train_idx: Vec<usize> = ds.indices(Split::Train).collect();
    let assess_idx: Vec<usize> = ds.indices(Split::Assess).collect();
    if assess_idx.is_empty() {
        return Err(CliError::Validation("dataset has no assess samples".into()));
    }
    let signed = |i: usize| strat.samples[i].estimate_m - ds.samples[i].true_distance_m;

    let assess_theta = visual_thetas(&conditions, &ds, &assess_idx)?;
    let records: Vec<AssessRecord> = assess_idx
        .par_iter()
        .zip(&assess_theta)
        .map(|(i, theta)| -> CliResult<AssessRecord> {
            let sample = &ds.samples[*i];
            let doc = tokenizer.tokenize(*i as u64, &sample.image, None)?;
            let novelty = model.novelty_with(&doc, theta)?;
            let inverted = tokenizer.tokenize(*i as u64, &sample.image.inverted(), None)?;
            let band = predictors.performance.predict(theta)?;
            let out = strat.samples[*i];
            Ok(AssessRecord {
                sample: *i,
                weather: sample.params.weather,
                time_of_day: sample.params.time_of_day,
                true_distance_m: sample.true_distance_m,
                estimate_m: out.estimate_m,
                observed_strategy: out.strategy,
                strategy_distribution: predictors.strategy.predict_distribution(theta)?,
                band: band.band,
                in_band_probability: band.in_band_probability,
                in_band: band.band.contains(signed(*i)),
                novelty_score: novelty.score,
                novelty_flag: novelty.flag,
                inverted_novelty_flag: model.novelty(&inverted)?.flag,
            })
        })
        .collect::<CliResult<_>>()?;

    let distributions: Vec<&[f64]> = records.iter().map(|r| r.strategy_distribution.as_slice()).collect();
    let executed: Vec<usize> = records.iter().map(|r| r.observed_strategy).collect();
    let mass = cfg.evaluate.credible_mass;
    let correctness_point = compute_correctness(&distributions, &executed, CorrectnessMode::Point, mass)?;
    let correctness_distribution =
        compute_correctness(&distributions, &executed, CorrectnessMode::Distribution, mass)?;

    let band_records: Vec<BandRecord> = records
        .iter()
        .map(|r| BandRecord {
            band: r.band,
            in_band_probability: r.in_band_probability,
            signed_error: r.estimate_m - r.true_distance_m,
            weather: r.weather,
            time_of_day: r.time_of_day,
        })
        .collect();
    let cal_mask = calibration_mask(train_idx.len(), cfg.predictors.calibration_every);
    let cal_idx: Vec<usize> = train_idx
        .iter()
        .zip(&cal_mask)
        .filter(|(_, c)| **c)
        .map(|(i, _)| *i)
        .collect();
    let cal_theta = visual_thetas(&conditions, &ds, &cal_idx)?;
    let calibration: Vec<BandRecord> = cal_idx
        .iter()
        .zip(&cal_theta)
        .map(|(i, theta)| {
            let band = predictors.performance.predict(theta)?;
            Ok(BandRecord {
                band: band.band,
                in_band_probability: band.in_band_probability,
                signed_error: signed(*i),
                weather: ds.samples[*i].params.weather,
                time_of_day: ds.samples[*i].params.time_of_day,
            })
        })
        .collect::<CliResult<_>>()?;
    let fidelity_fine = compute_fidelity(&band_records, FidelityMode::Fine, &calibration)?;
    let fidelity_coarse = compute_fidelity(&band_records, FidelityMode::Coarse, &calibration)?;

    let assess_params: Vec<SceneParams> = assess_idx.iter().map(|i| ds.samples[*i].params).collect();
    let abs_errors: Vec<f64> = assess_idx.iter().map(|i| signed(*i).abs()).collect();
    let coverage = compute_coverage(
        &assess_theta,
        &scene_factors(&assess_params),
        &abs_errors,
        &cfg.coverage_config(),
    )?;

    let train_flags: Vec<bool> = train_idx
        .par_iter()
        .map(|i| {
            let doc = tokenizer.tokenize(*i as u64, &ds.samples[*i].image, None)?;
            Ok(model.novelty(&doc)?.flag)
        })
        .collect::<CliResult<_>>()?;
    let novelty = NoveltySummary {
        threshold: model.novelty_threshold,
        train_flag_rate: flag_rate(train_flags.iter().copied()),
        assess_flag_rate: flag_rate(records.iter().map(|r| r.novelty_flag)),
        inverted_flag_rate: flag_rate(records.iter().map(|r| r.inverted_novelty_flag)),
    };

    let truths: Vec<f64> = records.iter().map(|r| r.true_distance_m).collect();
    let sq: Vec<f64> = records.iter().map(|r| (r.estimate_m - r.true_distance_m).powi(2)).collect();
    let payload = EvaluationArtifact {
        strategies: strat.model.k,
        assess_mse: mean(&sq),
        label_variance: variance(&truths),
        credible_mass: mass,
        correctness_point,
        correctness_distribution,
        fidelity_fine,
        fidelity_coarse,
        coverage,
        novelty,
        records,
    };
    log::info!(
        "correctness {:.3}/{:.3}, fidelity fine {:.3} coarse {:.3}, coverage {:?}",
        payload.correctness_point,
        payload.correctness_distribution,
        payload.fidelity_fine.fidelity,
        payload.fidelity_coarse.fidelity,
        payload.coverage.coverage
    );
    let out = wd.write_json(Artifact::Evaluation, &ctx.config_hash, &payload)?;
    Ok(StageFiles {
        inputs,
        outputs: vec![out],
    })
}

fn flag_rate(flags: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags {
        hit += usize::from(f);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

pub(super) fn simulate(ctx: &Context) -> CliResult<StageFiles> {
    let cfg = &ctx.config;
    let wd = &ctx.workdir;
    let gated = cfg.simulate.gated;
    let agent = wd.read_json::<AgentArtifact>(Artifact::Agent)?.payload.agent;
    let strat = wd.read_json::<StrategiesArtifact>(Artifact::Strategies)?.payload;
    let conditions = wd.read_json::<ConditionsArtifact>(Artifact::Conditions)?.payload;
    let predictors = wd.read_json::<PredictorsArtifact>(Artifact::Predictors)?.payload;
    let mut inputs: Vec<PathBuf> = [Artifact::Agent, Artifact::Strategies, Artifact::Conditions, Artifact::Predictors]
        .iter()
        .map(|a| wd.path(*a))
        .collect();
    let (requirements, req_path) = load_requirements(cfg)?;
    inputs.extend(req_path);

    let models = GuardModels {
        competency: CompetencyModels {
            tokenizer: conditions.tokenizer,
            conditions: conditions.model,
            strategy: predictors.strategy,
            performance: predictors.performance,
        },
        strategies: strat.model,
        probe: Some(predictors.probe),
    };
    let monitor = cfg.monitor_config();
    let guard = Guard {
        models: &models,
        requirements: &requirements,
        config: &monitor,
    };
    let spec = BatchSpec {
        episodes: cfg.simulate.episodes,
        conditions: cfg.simulate.mix.weights(),
        master_seed: cfg.stage_seed(Stage::Simulate),
        gated,
        config: cfg.episode_config(),
    };
    // Parallelism comes from the stage-wide pool.
    let batch = run_batch(&spec, &agent, gated.then_some(guard), None)?;

    let mut lines = Vec::new();
    for log in &batch.logs {
        write_episode_jsonl(log, &mut lines)?;
    }
    lines.flush().map_err(|e| CliError::io("buffering episode log", e))?;
    let episodes_path = wd.path(Artifact::Episodes { gated });
    write_atomic(&episodes_path, &lines)?;

    let at_risk: Vec<_> = batch
        .logs
        .iter()
        .filter(|l| l.max_p_miss().is_some_and(|p| p > AT_RISK_P_MISS))
        .collect();
    let payload = SimulationArtifact {
        gated,
        requirements: requirements.iter().map(|r| r.to_string()).collect(),
        overall: batch.overall.clone(),
        summaries: batch.summaries.clone(),
        reliability: compute_reliability(&batch.logs, &requirements),
        at_risk_episodes: at_risk.len(),
        at_risk_with_fallback: at_risk
            .iter()
            .filter(|l| l.ticks.iter().any(|t| t.action != ActionKind::Proceed))
            .count(),
    };
    log::info!(
        "{} episodes ({}): detection {:.3}, safe {:.3}",
        batch.overall.episodes,
        if gated { "gated" } else { "ungated" },
        batch.overall.detection_rate(),
        batch.overall.safe_rate()
    );
    let out = wd.write_json(Artifact::Simulation { gated }, &ctx.config_hash, &payload)?;
    Ok(StageFiles {
        inputs,
        outputs: vec![out, episodes_path],
    })
}

