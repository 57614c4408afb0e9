use std::path::PathBuf;
use std::process::ExitCode;

use braincl_cli::{cmd_report, cmd_run, cmd_synth, commands::format_run, report, CliError, Experiment, RunOverrides};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "braincl", version, about = "Buffer-free continual lesion segmentation on synthetic volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every dataset of an experiment file (skips up-to-date ones).
    Synth { experiment: PathBuf },
    /// Train one sequence and write its run directory.
    Run {
        experiment: PathBuf,
        /// Strategy preset overriding the file's strategy.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Named ordering from the file's `sequences`.
        #[arg(long)]
        sequence: Option<String>,
    },
    /// Compare finished runs; paths may be run directories or their parents.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where report.md, report.csv and the SVG plots go.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Synth { experiment } => {
            let exp = Experiment::load(&experiment)?;
            let s = cmd_synth(&exp)?;
            println!(
                "generated {} dataset(s), skipped {} up-to-date: {}",
                s.generated.len(),
                s.skipped.len(),
                exp.data_root.display()
            );
            Ok(true)
        }
        Command::Run {
            experiment,
            strategy,
            seed,
            sequence,
        } => {
            let exp = Experiment::load(&experiment)?;
            let summary = cmd_run(&exp, &RunOverrides { strategy, seed, sequence })?;
            println!("{}", summary.run_dir.display());
            print!("{}", format_run(&summary.outcome.matrix, summary.metrics.as_ref()));
            Ok(!summary.failed())
        }
        Command::Report { runs, out } => {
            let r = cmd_report(&runs, &out)?;
            print!("{}", report::markdown(&r));
            println!("\n{} run(s) reported, {} skipped; files in {}", r.runs.len(), r.skipped.len(), out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
