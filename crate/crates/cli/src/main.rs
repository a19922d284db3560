mod commands;
mod config;
mod convert;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use convert::SourceFormat;

#[derive(Parser)]
#[command(
    name = "match",
    version,
    about = "Train and evaluate reference-free task/code alignment metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert benchmark results into the dataset format.
    Convert {
        #[arg(long, value_enum)]
        format: SourceFormat,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Binary labels instead of continuous ones.
        #[arg(long)]
        binary: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train one model per split and report test correlations.
    Train(TrainArgs),
    /// Score (task, code) records with a trained checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-Lines with `task` and `code`, optionally `id`; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output JSON-Lines; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Correlate score files with dataset labels.
    Evaluate(EvaluateArgs),
    /// Merge reports into one table.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the merged report as JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `training.learning_rate=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    experiments: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Replace the outputs of an earlier run in the same directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// One JSON-Lines file of `{id, score}` per experiment.
    #[arg(long = "scores", required = true)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "MATCH")]
    metric_name: String,
    /// Extra metric scores as NAME=PATH, reported without recomputation.
    #[arg(long = "baseline", value_name = "NAME=PATH")]
    baselines: Vec<String>,
    /// Leave out the lexical baselines.
    #[arg(long)]
    no_lexical: bool,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Convert {
            format,
            input,
            output,
            force,
        } => commands::convert(format, &input, &output, force),
        Command::Synth {
            output,
            pairs,
            seed,
            binary,
            force,
        } => commands::synth(&output, pairs, seed, binary, force),
        Command::Train(a) => commands::train(commands::TrainRequest {
            config: a.config,
            sets: a.sets,
            dataset: a.dataset,
            output: a.output,
            experiments: a.experiments,
            seed: a.seed,
            jobs: a.jobs,
            force: a.force,
        }),
        Command::Score {
            checkpoint,
            input,
            output,
            jobs,
        } => commands::score(&checkpoint, input.as_deref(), output.as_deref(), jobs),
        Command::Evaluate(a) => commands::evaluate(commands::EvaluateRequest {
            dataset: a.dataset,
            scores: a.scores,
            output: a.output,
            metric_name: a.metric_name,
            baselines: a.baselines,
            lexical: !a.no_lexical,
            force: a.force,
        }),
        Command::Compare { reports, output } => commands::compare(&reports, output.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.code())
        }
    }
}
