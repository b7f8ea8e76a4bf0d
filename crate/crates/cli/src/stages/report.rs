use std::fs;

use competency::metrics::{MetricsReport, SampleCounts};
use serde::Serialize;

use super::*;
use crate::artifact::{write_atomic, MANIFEST_DIR};

pub const PLOT_DIR: &str = "plots";
const DIAGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPayload {
    pub metrics: MetricsReport,
    pub strategies: usize,
    pub assess_mse: f64,
    pub label_variance: f64,
    pub novelty: NoveltySummary,
    pub simulations: Vec<SimulationArtifact>,
    /// Manifests whose recorded hashes matched the files on disk.
    pub verified_manifests: Vec<String>,
}

/// Re-hashes every input and output listed by the stage manifests in the
/// working directory. Returns the verified manifest names.
pub fn verify_provenance(wd: &Workdir) -> CliResult<Vec<String>> {
    let dir = wd.root().join(MANIFEST_DIR);
    let mut names: Vec<String> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(String::from))
            .filter(|n| n != Stage::Report.name())
            .collect(),
        Err(_) => Vec::new(),
    };
    names.sort();
    for name in &names {
        let manifest = wd
            .read_manifest(name)?
            .ok_or_else(|| CliError::Internal(format!("manifest {name} vanished")))?;
        for file in manifest.inputs.iter().chain(&manifest.outputs) {
            let path = wd.root().join(&file.path);
            let actual = if path.is_file() { Some(sha256_file(&path)?) } else { None };
            if actual.as_deref() != Some(file.sha256.as_str()) {
                return Err(CliError::Validation(format!(
                    "provenance check failed: {} no longer matches manifest {name}; rerun `competency {}`",
                    file.path,
                    name.trim_end_matches("-gated").trim_end_matches("-ungated")
                )));
            }
        }
    }
    Ok(names)
}

pub(super) fn report(ctx: &Context) -> CliResult<StageFiles> {
    let wd = &ctx.workdir;
    let eval = wd.read_json::<EvaluationArtifact>(Artifact::Evaluation)?.payload;
    let mut inputs = vec![wd.path(Artifact::Evaluation)];
    let mut simulations = Vec::new();
    // The configured mode comes first and supplies the reliability metric.
    let preferred = ctx.config.simulate.gated;
    for gated in [preferred, !preferred] {
        let artifact = Artifact::Simulation { gated };
        if wd.path(artifact).is_file() {
            simulations.push(wd.read_json::<SimulationArtifact>(artifact)?.payload);
            inputs.push(wd.path(artifact));
        }
    }
    let Some(primary) = simulations.first() else {
        return Err(CliError::MissingArtifact {
            path: wd.path(Artifact::Simulation { gated: preferred }),
            producer: Stage::Simulate.name(),
        });
    };
    let verified_manifests = verify_provenance(wd)?;

    let metrics = MetricsReport {
        coverage: eval.coverage.coverage,
        correctness_point: eval.correctness_point,
        correctness_distribution: eval.correctness_distribution,
        fidelity_coarse: eval.fidelity_coarse.fidelity,
        fidelity_fine: eval.fidelity_fine.fidelity,
        brier_coarse: eval.fidelity_coarse.brier,
        brier_fine: eval.fidelity_fine.brier,
        reliability: primary.reliability.clone(),
        counts: SampleCounts {
            coverage: eval.records.len(),
            correctness: eval.records.len(),
            fidelity: eval.fidelity_fine.samples,
            episodes: primary.overall.episodes,
        },
        coverage_detail: eval.coverage.factors.clone(),
    };
    let hash = &ctx.config_hash;
    let mut outputs = vec![
        write_csv(wd, "coverage_levels.csv", hash, coverage_level_rows(&eval))?,
        write_csv(wd, "coverage_probe.csv", hash, coverage_probe_rows(&eval))?,
        write_csv(wd, "reliability_diagram.csv", hash, diagram_rows(&eval))?,
        write_csv(wd, "outcomes.csv", hash, outcome_rows(&simulations))?,
    ];
    let payload = ReportPayload {
        metrics,
        strategies: eval.strategies,
        assess_mse: eval.assess_mse,
        label_variance: eval.label_variance,
        novelty: eval.novelty.clone(),
        simulations,
        verified_manifests,
    };
    outputs.insert(0, wd.write_json(Artifact::Report, hash, &payload)?);
    log::info!("report written with {} plot tables", outputs.len() - 1);
    Ok(StageFiles { inputs, outputs })
}

#[derive(Serialize)]
struct CoverageLevelRow<'a> {
    factor: &'a str,
    level: &'a str,
    samples: usize,
    mean_abs_error_m: f64,
}

fn coverage_level_rows(eval: &EvaluationArtifact) -> Vec<CoverageLevelRow<'_>> {
    eval.coverage
        .factors
        .iter()
        .flat_map(|f| {
            f.level_errors.iter().map(move |(level, n, m)| CoverageLevelRow {
                factor: &f.factor,
                level,
                samples: *n,
                mean_abs_error_m: *m,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct CoverageProbeRow<'a> {
    factor: &'a str,
    spread_m: f64,
    permutation_p: f64,
    controlling: bool,
    balanced_accuracy: Option<f64>,
    identified: bool,
}

fn coverage_probe_rows(eval: &EvaluationArtifact) -> Vec<CoverageProbeRow<'_>> {
    eval.coverage
        .factors
        .iter()
        .map(|f| CoverageProbeRow {
            factor: &f.factor,
            spread_m: f.spread_m,
            permutation_p: f.permutation_p,
            controlling: f.controlling,
            balanced_accuracy: f.probe_balanced_accuracy,
            identified: f.identified,
        })
        .collect()
}

#[derive(Debug, PartialEq, Serialize)]
struct DiagramRow {
    bin_low: f64,
    bin_high: f64,
    samples: usize,
    mean_forecast: Option<f64>,
    observed_rate: Option<f64>,
}

/// Fine forecasts binned on [0, 1]; the top bin is closed.
fn diagram_rows(eval: &EvaluationArtifact) -> Vec<DiagramRow> {
    let mut sums = vec![(0usize, 0.0f64, 0usize); DIAGRAM_BINS];
    for r in &eval.records {
        let bin = ((r.in_band_probability * DIAGRAM_BINS as f64) as usize).min(DIAGRAM_BINS - 1);
        sums[bin].0 += 1;
        sums[bin].1 += r.in_band_probability;
        sums[bin].2 += usize::from(r.in_band);
    }
    sums.iter()
        .enumerate()
        .map(|(b, (n, f, hits))| DiagramRow {
            bin_low: b as f64 / DIAGRAM_BINS as f64,
            bin_high: (b + 1) as f64 / DIAGRAM_BINS as f64,
            samples: *n,
            mean_forecast: (*n > 0).then(|| f / *n as f64),
            observed_rate: (*n > 0).then(|| *hits as f64 / *n as f64),
        })
        .collect()
}

#[derive(Serialize)]
struct OutcomeRow {
    mode: &'static str,
    weather: String,
    time_of_day: String,
    episodes: usize,
    detected: usize,
    collisions: usize,
    handed_off: usize,
    premature: usize,
    detection_rate: f64,
    safe_rate: f64,
}

fn outcome_rows(sims: &[SimulationArtifact]) -> Vec<OutcomeRow> {
    let mut rows = Vec::new();
    for sim in sims {
        let mode = if sim.gated { "gated" } else { "ungated" };
        for s in &sim.summaries {
            rows.push(OutcomeRow {
                mode,
                weather: s.weather.to_string(),
                time_of_day: s.time_of_day.to_string(),
                episodes: s.counts.episodes,
                detected: s.counts.detected,
                collisions: s.counts.collisions,
                handed_off: s.counts.handed_off,
                premature: s.counts.premature,
                detection_rate: s.detection_rate,
                safe_rate: s.safe_rate,
            });
        }
        rows.push(OutcomeRow {
            mode,
            weather: "all".into(),
            time_of_day: "all".into(),
            episodes: sim.overall.episodes,
            detected: sim.overall.detected,
            collisions: sim.overall.collisions,
            handed_off: sim.overall.handed_off,
            premature: sim.overall.premature,
            detection_rate: sim.overall.detection_rate(),
            safe_rate: sim.overall.safe_rate(),
        });
    }
    rows
}

/// CSV under `plots/`, led by a `# config_hash=...` comment line.
fn write_csv<R: Serialize>(wd: &Workdir, name: &str, config_hash: &str, rows: Vec<R>) -> CliResult<PathBuf> {
    let mut bytes = format!("# config_hash={config_hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        for row in rows {
            w.serialize(row).map_err(|e| CliError::Internal(format!("{name}: {e}")))?;
        }
        w.flush().map_err(|e| CliError::io(format!("writing {name}"), e))?;
    }
    let dir = wd.root().join(PLOT_DIR);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("creating {}", display(&dir)), e))?;
    let path = dir.join(name);
    write_atomic(&path, &bytes)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagram_bins_cover_unit_interval() {
        let rec = |p: f64, hit: bool| AssessRecord {
            sample: 0,
            weather: Weather::Clear,
            time_of_day: TimeOfDay::Day,
            true_distance_m: 10.0,
            estimate_m: 10.0,
            observed_strategy: 0,
            strategy_distribution: vec![1.0],
            band: competency::predictors::ErrorBand {
                q10: -1.0,
                q90: 1.0,
                mean: 0.0,
            },
            in_band_probability: p,
            in_band: hit,
            novelty_score: 0.0,
            novelty_flag: false,
            inverted_novelty_flag: false,
        };
        let eval = EvaluationArtifact {
            strategies: 1,
            assess_mse: 0.0,
            label_variance: 1.0,
            credible_mass: 0.95,
            correctness_point: 1.0,
            correctness_distribution: 1.0,
            fidelity_fine: FidelityScore {
                fidelity: 1.0,
                brier: 0.0,
                samples: 3,
            },
            fidelity_coarse: FidelityScore {
                fidelity: 1.0,
                brier: 0.0,
                samples: 3,
            },
            coverage: CoverageReport {
                coverage: None,
                factors: vec![],
            },
            novelty: NoveltySummary {
                threshold: 0.0,
                train_flag_rate: 0.0,
                assess_flag_rate: 0.0,
                inverted_flag_rate: 0.0,
            },
            records: vec![rec(0.0, false), rec(0.85, true), rec(1.0, true), rec(0.8, false)],
        };
        let rows = diagram_rows(&eval);
        assert_eq!(rows.len(), DIAGRAM_BINS);
        assert_eq!(rows[0].samples, 1);
        assert_eq!(rows[8].samples, 2);
        assert_eq!(rows[8].observed_rate, Some(0.5));
        assert_eq!(rows[9].samples, 1);
        assert_eq!(rows[5].mean_forecast, None);
    }
}
