//! `rljp`: run the rule-learning judgment prediction pipeline from the shell.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rljp_core::pipeline::{Pipeline, PipelineError, RunOptions, Stage, StageOutcome, METRICS_TXT};

#[derive(Parser, Debug)]
#[command(name = "rljp", version, about = "Learn and apply first-order-logic judgment rules")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true, default_value = "rljp.json")]
    config: PathBuf,
    /// Directory holding every artifact of the run.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip stages whose inputs and outputs are unchanged.
    #[arg(long, global = true)]
    resume: bool,
    /// Use the offline simulated chat model and hashing embedder.
    #[arg(long, global = true)]
    mock: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Load the corpus into normalized cases.
    Ingest,
    /// Partition cases into train, validation and test.
    Split,
    /// Group training precedents by label combination.
    Group,
    /// Author one initial rule per target.
    InitRules,
    /// Mine hard negatives for each target.
    BuildConfusable,
    /// Refine every rule on its confusable quiz.
    Optimize,
    /// Train the candidate-label provider.
    TrainCandidates,
    /// Predict judgments for the test split.
    Examine,
    /// Score predictions against gold labels.
    Evaluate,
    /// All stages in order.
    RunAll,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Ingest => Stage::Ingest,
            Command::Split => Stage::Split,
            Command::Group => Stage::Group,
            Command::InitRules => Stage::InitRules,
            Command::BuildConfusable => Stage::BuildConfusable,
            Command::Optimize => Stage::Optimize,
            Command::TrainCandidates => Stage::TrainCandidates,
            Command::Examine => Stage::Examine,
            Command::Evaluate => Stage::Evaluate,
            Command::RunAll => return None,
        })
    }
}

fn report(outcome: &StageOutcome) {
    let verb = if outcome.skipped { "up to date" } else { "done" };
    println!("{:<17} {verb}", outcome.stage.name());
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let options = RunOptions {
        run_dir: cli.common.run_dir.clone(),
        seed: cli.common.seed,
        resume: cli.common.resume,
        mock: cli.common.mock,
    };
    let stage = cli.command.stage();
    let fresh = stage.is_none() && !options.resume;
    let mut pipeline = Pipeline::open(&cli.common.config, &options, fresh)?;
    match stage {
        Some(stage) => report(&pipeline.run_stage(stage)?),
        None => {
            for stage in Stage::ALL {
                report(&pipeline.run_stage(stage)?);
            }
            let table = pipeline.run_dir().join(METRICS_TXT);
            if let Ok(text) = std::fs::read_to_string(&table) {
                println!("\n{text}");
            }
        }
    }
    let usage = pipeline.manifest().usage;
    println!(
        "run {} in {}: {} agent calls",
        pipeline.manifest().run_id,
        pipeline.run_dir().display(),
        usage.calls
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
