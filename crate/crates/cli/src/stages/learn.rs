use competency::agent::{init_agent, train as train_agent};
use competency::conditions::{build_codebook, fit_hdp, CompetencyInfo, Document, ErrorTerciles, Tokenizer};
use competency::guard::{ConditionTags, TagProbe};
use competency::predictors::{PerformancePredictor, StrategyPredictor};
use competency::rng::mix;
use competency::scene::{generate_dataset, write_dataset, Split};
use competency::strategy::{condition_affinity, fit_strategies};
use rayon::prelude::*;

use super::*;
use crate::artifact::write_atomic;

pub(super) fn gen_data(ctx: &Context) -> CliResult<StageFiles> {
    let cfg = &ctx.config;
    let ds = generate_dataset(cfg.data.samples, ctx.config.stage_seed(Stage::GenData), &cfg.data.mix.weights())?;
    let mut body = Vec::new();
    write_dataset(&ds, &mut body)?;
    let bin = ctx.workdir.path(Artifact::DatasetBin);
    write_atomic(&bin, &body)?;
    let meta = DatasetMeta {
        samples: ds.len(),
        master_seed: ds.master_seed,
        weights: ds.weights.clone(),
        body_sha256: sha256_file(&bin)?,
    };
    let json = ctx.workdir.write_json(Artifact::Dataset, &ctx.config_hash, &meta)?;
    log::info!("wrote {} samples", ds.len());
    Ok(StageFiles {
        inputs: vec![],
        outputs: vec![bin, json],
    })
}

pub(super) fn train(ctx: &Context) -> CliResult<StageFiles> {
    let cfg = &ctx.config;
    let (ds, inputs) = load_dataset(&ctx.workdir)?;
    let times = &cfg.agent.train_time_of_day;
    let data = if times.is_empty() {
        ds
    } else {
        ds.filtered(|s| times.contains(&s.params.time_of_day))
    };
    let initial = init_agent(cfg.agent_config())?;
    let (agent, report) = train_agent(&initial, &data, &cfg.train_params())?;
    log::info!(
        "trained on {} samples, final epoch mse {:.3}, assess mse {:?}",
        report.train_samples,
        report.epoch_train_mse.last().copied().unwrap_or(f64::NAN),
        report.assess_mse
    );
    let payload = AgentArtifact {
        agent,
        report,
        train_time_of_day: times.clone(),
    };
    let out = ctx.workdir.write_json(Artifact::Agent, &ctx.config_hash, &payload)?;
    Ok(StageFiles {
        inputs,
        outputs: vec![out],
    })
}

pub(super) fn strategies(ctx: &Context) -> CliResult<StageFiles> {
    let cfg = &ctx.config;
    let (ds, mut inputs) = load_dataset(&ctx.workdir)?;
    let agent = ctx.workdir.read_json::<AgentArtifact>(Artifact::Agent)?.payload.agent;
    inputs.push(ctx.workdir.path(Artifact::Agent));
    let outputs: Vec<(f64, Vec<f64>)> = ds
        .samples
        .par_iter()
        .map(|s| agent.forward(&s.image).map(|(e, t)| (e, t.values)))
        .collect::<competency::Result<_>>()?;
    let train_idx: Vec<usize> = ds.indices(Split::Train).collect();
    let traces: Vec<&[f64]> = train_idx.iter().map(|i| outputs[*i].1.as_slice()).collect();
    let model = fit_strategies(&traces, cfg.strategies.k.mode()?, &cfg.strategy_options())?;
    log::info!("K = {} (silhouette {:?})", model.k, model.silhouette);
    let samples = outputs
        .par_iter()
        .map(|(estimate_m, trace)| {
            let (strategy, centroid_distance) = model.assign(trace)?;
            Ok(SampleOutput {
                estimate_m: *estimate_m,
                strategy,
                centroid_distance,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let train_strategies: Vec<usize> = train_idx.iter().map(|i| samples[*i].strategy).collect();
    let factor = |name: &str, tag: &dyn Fn(usize) -> String| -> CliResult<FactorAffinity> {
        let tags: Vec<String> = train_idx.iter().map(|i| tag(*i)).collect();
        Ok(FactorAffinity {
            factor: name.to_string(),
            table: condition_affinity(&train_strategies, &tags, model.k)?,
        })
    };
    let p = |i: usize| ds.samples[i].params;
    let affinity = vec![
        factor("time_of_day", &|i| p(i).time_of_day.to_string())?,
        factor("weather", &|i| p(i).weather.to_string())?,
        factor("obstacle_kind", &|i| p(i).obstacle_kind.to_string())?,
    ];
    let payload = StrategiesArtifact {
        model,
        samples,
        affinity,
    };
    let out = ctx.workdir.write_json(Artifact::Strategies, &ctx.config_hash, &payload)?;
    Ok(StageFiles {
        inputs,
        outputs: vec![out],
    })
}

pub(super) fn conditions(ctx: &Context) -> CliResult<StageFiles> {
    let cfg = &ctx.config;
    let (ds, mut inputs) = load_dataset(&ctx.workdir)?;
    let strat = ctx.workdir.read_json::<StrategiesArtifact>(Artifact::Strategies)?.payload;
    inputs.push(ctx.workdir.path(Artifact::Strategies));
    check_alignment(&ds, &strat)?;
    let codebook = build_codebook(&ds, cfg.conditions.visual_words, cfg.codebook_seed())?;
    let train_idx: Vec<usize> = ds.indices(Split::Train).collect();
    let abs_error = |i: usize| (strat.samples[i].estimate_m - ds.samples[i].true_distance_m).abs();
    let train_abs: Vec<f64> = train_idx.iter().map(|i| abs_error(*i)).collect();
    let terciles = ErrorTerciles::from_abs_errors(&train_abs)?;
    let tokenizer = Tokenizer::with_competency(codebook, strat.model.k, terciles);
    let corpus: Vec<Document> = train_idx
        .par_iter()
        .map(|i| {
            tokenizer.tokenize(
                *i as u64,
                &ds.samples[*i].image,
                Some(CompetencyInfo {
                    strategy_id: strat.samples[*i].strategy,
                    abs_error_m: abs_error(*i),
                }),
            )
        })
        .collect::<competency::Result<_>>()?;
    let hdp = cfg.hdp_config(mix(cfg.stage_seed(Stage::Conditions), 1));
    let model = fit_hdp(&corpus, &tokenizer.vocab, hdp)?;
    log::info!(
        "{} of {} topics active, novelty threshold {:.3}",
        model.active_topics(),
        model.topics(),
        model.novelty_threshold
    );
    let payload = ConditionsArtifact { tokenizer, model };
    let out = ctx.workdir.write_json(Artifact::Conditions, &ctx.config_hash, &payload)?;
    Ok(StageFiles {
        inputs,
        outputs: vec![out],
    })
}

pub(super) fn predictors(ctx: &Context) -> CliResult<StageFiles> {
    let cfg = &ctx.config;
    let (ds, mut inputs) = load_dataset(&ctx.workdir)?;
    let strat = ctx.workdir.read_json::<StrategiesArtifact>(Artifact::Strategies)?.payload;
    let conditions = ctx.workdir.read_json::<ConditionsArtifact>(Artifact::Conditions)?.payload;
    inputs.push(ctx.workdir.path(Artifact::Strategies));
    inputs.push(ctx.workdir.path(Artifact::Conditions));
    check_alignment(&ds, &strat)?;
    let train_idx: Vec<usize> = ds.indices(Split::Train).collect();
    let thetas = visual_thetas(&conditions, &ds, &train_idx)?;
    let ids: Vec<usize> = train_idx.iter().map(|i| strat.samples[*i].strategy).collect();
    let signed: Vec<f64> = train_idx
        .iter()
        .map(|i| strat.samples[*i].estimate_m - ds.samples[*i].true_distance_m)
        .collect();
    let calibration = calibration_mask(train_idx.len(), cfg.predictors.calibration_every);
    let strategy = StrategyPredictor::fit(&thetas, &ids, strat.model.k, &cfg.logistic_params())?;
    let performance = PerformancePredictor::fit(
        &thetas,
        &signed,
        &calibration,
        cfg.predictors.cells,
        cfg.stage_seed(Stage::Predictors),
    )?;
    let tags: Vec<ConditionTags> = train_idx.iter().map(|i| ConditionTags::of(&ds.samples[*i].params)).collect();
    let probe = TagProbe::fit(&thetas, &tags)?;
    let calibration_samples = calibration.iter().filter(|c| **c).count();
    log::info!(
        "{} performance cells, pooled in-band rate {:.3}",
        performance.cells.len(),
        performance.pooled_in_band_rate
    );
    let payload = PredictorsArtifact {
        strategy,
        performance,
        probe,
        fit_samples: train_idx.len() - calibration_samples,
        calibration_samples,
    };
    let out = ctx.workdir.write_json(Artifact::Predictors, &ctx.config_hash, &payload)?;
    Ok(StageFiles {
        inputs,
        outputs: vec![out],
    })
}

pub(super) fn check_alignment(ds: &Dataset, strat: &StrategiesArtifact) -> CliResult<()> {
    if strat.samples.len() != ds.len() {
        return Err(CliError::Validation(format!(
            "{} covers {} samples but the dataset has {}; rerun `competency strategies`",
            Artifact::Strategies.file_name(),
            strat.samples.len(),
            ds.len()
        )));
    }
    Ok(())
}
