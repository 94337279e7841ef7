use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csma_icl::experiment_harness::{execute, Command, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "csma-icl",
    version,
    about = "Contention-window tuning by in-context learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimal attempt rate, throughput and ladder per density.
    Solve(Common),
    /// Training dataset and prompts.
    Datagen(Common),
    /// Train the attention model.
    Train(Common),
    /// Compare ICL, optimal and model-based ladders on test densities.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained model file; trains in-process when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Simulator against the analytic model.
    Validate(Common),
    /// Density-mismatch benchmark.
    Bench(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common, model) = match cli.command {
        Cmd::Solve(c) => (Command::Solve, c, None),
        Cmd::Datagen(c) => (Command::Datagen, c, None),
        Cmd::Train(c) => (Command::Train, c, None),
        Cmd::Eval { common, model } => (Command::Eval, common, model),
        Cmd::Validate(c) => (Command::Validate, c, None),
        Cmd::Bench(c) => (Command::Bench, c, None),
    };
    let result = (|| {
        let mut cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        execute(command, &cfg, &common.out, model.as_deref())
    })();
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "command": command,
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
