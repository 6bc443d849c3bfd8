use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pflsim::harness::{read_report, run_experiment, run_sweep, trigger_text, write_outputs, ExperimentConfig};
use pflsim::Error;

#[derive(Parser)]
#[command(name = "pflsim", version, about = "Backdoor attacks against personalized federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Replaces federation.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// `dotted.key=value`, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the cartesian product of a grid file's `[grid]` table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "sweep_out")]
        out: PathBuf,
    },
    /// Print the trigger stored in a report.
    DumpTrigger {
        #[arg(long)]
        report: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, out, seed, mut overrides } => {
            if let Some(s) = seed {
                overrides.push(format!("federation.seed={s}"));
            }
            let cfg = ExperimentConfig::from_toml_with_overrides(&read_config(&config)?, &overrides)?;
            cfg.validate()?;
            let report = run_experiment(&cfg, config.parent())?;
            write_outputs(&report, &out)?;
            println!(
                "{} {} {} acc={:.4} asr={}",
                report.strategy,
                report.attack,
                report.defense,
                report.mean_acc,
                report.mean_asr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Sweep { config, grid, out } => {
            let grid_text = std::fs::read_to_string(&grid)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", grid.display())))?;
            let rows = run_sweep(&read_config(&config)?, &grid_text, config.parent(), &out)?;
            for r in rows {
                println!(
                    "run-{:03} {} acc={:.4} asr={}",
                    r.run,
                    r.overrides.join(" "),
                    r.mean_acc,
                    r.mean_asr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
                );
            }
        }
        Command::DumpTrigger { report } => {
            print!("{}", trigger_text(&read_report(&report)?.trigger));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
