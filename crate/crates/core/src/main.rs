use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedpred::experiment::results::{compare, summary_csv};
use fedpred::experiment::runner::{evaluate_saved, inspect_partitions};
use fedpred::experiment::{run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "fedpred",
    version,
    about = "One-round federated Bayesian learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed, heterogeneity) cell of an experiment.
    Run { config: PathBuf },
    /// Print per-client class histograms for each heterogeneity level.
    InspectPartition { config: PathBuf },
    /// Score a saved ensemble on a CSV file (header row, target last).
    Eval { ensemble: PathBuf, data: PathBuf },
    /// Rebuild summary.csv and curves.csv from a results directory.
    Compare { results_dir: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> fedpred::Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg)?;
            for r in &report.results {
                let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                match &r.error {
                    None => println!(
                        "{:<18} h={:<4} seed={:<3} {}  rounds={} uplink={}B  {:.1}s",
                        r.method.name(),
                        r.heterogeneity,
                        r.seed,
                        metrics.join(" "),
                        r.rounds,
                        r.uplink_bytes,
                        r.wall_seconds
                    ),
                    Some(e) => println!(
                        "{:<18} h={:<4} seed={:<3} FAILED: {e}",
                        r.method.name(),
                        r.heterogeneity,
                        r.seed
                    ),
                }
            }
            if let Some(dir) = &report.output_dir {
                println!("results written to {}", dir.display());
            }
            let failed = report.failures();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed", report.results.len());
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::InspectPartition { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            for (h, hists) in inspect_partitions(&cfg)? {
                println!("heterogeneity {h}");
                for (i, hist) in hists.iter().enumerate() {
                    let cells: Vec<String> = hist.iter().map(usize::to_string).collect();
                    println!(
                        "  client {i}: [{}] total {}",
                        cells.join(" "),
                        hist.iter().sum::<usize>()
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { ensemble, data } => {
            for (k, v) in evaluate_saved(&ensemble, &data)? {
                println!("{k},{v}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { results_dir } => {
            let rows = compare(&results_dir)?;
            print!("{}", summary_csv(&rows)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
