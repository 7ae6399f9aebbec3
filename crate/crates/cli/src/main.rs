use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcil_core::trainer::Method;

#[derive(Parser)]
#[command(name = "mcil", version, about = "Multimodal class-incremental learning runs and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic dataset of a config as a feature file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs a scenario and writes results.json, accuracy_matrix.csv and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Re-evaluates a checkpoint on the stage it was saved after.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Option<usize>,
    },
    /// Emits the comparison table, forgetting curves and confusion heatmaps.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method {s:?} (expected ours, naive_finetune or zero_shot)"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::GenData { config, out } => mcil_cli::cmd_gen_data(&config, &out),
        Command::Run { config, out, method } => mcil_cli::cmd_run(&config, &out, method),
        Command::Eval { config, checkpoint, task } => mcil_cli::cmd_eval(&config, &checkpoint, task),
        Command::Report { out, results } => mcil_cli::cmd_report(&results, &out),
    };
    ExitCode::from(code as u8)
}
