use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use competency_cli::{run_pipeline, run_stage, CliResult, Context, PipelineConfig, Stage};

/// Competency-aware perception pipeline.
#[derive(Parser, Debug)]
#[command(name = "competency", version)]
struct Cli {
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding stage artifacts.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// Overrides the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Train the distance-estimation agent.
    Train,
    /// Cluster activation traces into strategies.
    Strategies,
    /// Fit the condition topic model.
    Conditions,
    /// Fit strategy and performance predictors.
    Predictors,
    /// Score coverage, correctness, fidelity and novelty on the assess split.
    Evaluate,
    /// Run closed-loop episodes.
    Simulate(SimArgs),
    /// Verify provenance and merge metrics into the final report.
    Report,
    /// Run every stage in order.
    Run(SimArgs),
    /// Print the effective config as TOML.
    ShowConfig,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Gate actions through the reliability monitor.
    #[arg(long, conflicts_with = "ungated")]
    gated: bool,
    /// Run the agent without the monitor.
    #[arg(long)]
    ungated: bool,
    /// Requirements file, one requirement per line.
    #[arg(long)]
    requirements: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Simulate(sim) | Command::Run(sim) = &cli.command {
        if sim.gated {
            cfg.simulate.gated = true;
        }
        if sim.ungated {
            cfg.simulate.gated = false;
        }
        if let Some(path) = &sim.requirements {
            cfg.simulate.requirements_path = Some(path.clone());
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let ctx = Context::new(&cli.workdir, cfg, cli.workers)?;
    let stage = match &cli.command {
        Command::GenData => Stage::GenData,
        Command::Train => Stage::Train,
        Command::Strategies => Stage::Strategies,
        Command::Conditions => Stage::Conditions,
        Command::Predictors => Stage::Predictors,
        Command::Evaluate => Stage::Evaluate,
        Command::Simulate(_) => Stage::Simulate,
        Command::Report => Stage::Report,
        Command::Run(_) => {
            for m in run_pipeline(&ctx)? {
                println!("{}: {} outputs", m.stage, m.outputs.len());
            }
            return Ok(());
        }
        Command::ShowConfig => unreachable!(),
    };
    let manifest = run_stage(&ctx, stage)?;
    for out in &manifest.outputs {
        println!("{}  {}", out.sha256, out.path);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
