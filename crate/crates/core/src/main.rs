use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use layerfed::cli::{cmd_compare, cmd_run, cmd_sweep_r, parse_methods, parse_thresholds, CliError, RunOptions};

/// Layer-wise personalized federated learning simulator.
#[derive(Debug, Parser)]
#[command(name = "layerfed", version)]
struct Cli {
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the fusion weight matrix of every round (run only).
    #[arg(long, global = true)]
    dump_weights: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment.
    Run { config: PathBuf },
    /// Run several methods on identical data.
    Compare {
        config: PathBuf,
        /// Comma-separated: fedavg,fedprox,fedamp,pfedcfr
        #[arg(long)]
        methods: String,
    },
    /// Sweep the personalized-layer threshold.
    #[command(name = "sweep-r")]
    SweepR {
        config: PathBuf,
        /// Comma-separated thresholds, e.g. 0,2,4,6
        #[arg(long = "r")]
        r: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let opts = RunOptions {
        out: cli.out,
        seed: cli.seed,
        dump_weights: cli.dump_weights,
    };
    match cli.command {
        Command::Run { config } => {
            let s = cmd_run(&config, &opts)?;
            println!("{} final accuracy {:.4} ± {:.4}", s.method, s.acc_mean, s.acc_std);
        }
        Command::Compare { config, methods } => {
            for row in cmd_compare(&config, &parse_methods(&methods)?, &opts)? {
                println!("{:<8} {:.4} ± {:.4}", row.method, row.acc_mean, row.acc_std);
            }
        }
        Command::SweepR { config, r } => {
            for row in cmd_sweep_r(&config, &parse_thresholds(&r)?, &opts)? {
                println!("r={:<3} {:.4} ± {:.4}", row.r, row.acc_mean, row.acc_std);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
