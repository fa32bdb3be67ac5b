//! Command-line driver for the quantum double simulator.
//!
//! `qdouble run <config.json>` executes one experiment and writes a JSON
//! report of named quantities with tolerances and pass flags. Exit code 0
//! means every quantity passed; 1 means the run completed but a quantity
//! failed; 2 means the configuration itself was invalid. `qdouble list`
//! prints the experiment catalog.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qdouble::experiments::{ExperimentReport, EXPERIMENTS};

#[derive(Parser)]
#[command(name = "qdouble", version, about = "Quantum double ground states, string operators, and braiding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON configuration file.
    Run {
        /// Path to the configuration file.
        config: PathBuf,
        /// Write the JSON report here (overrides the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the global pool (default: all cores).
        /// Results are identical for any thread count.
        #[arg(long)]
        threads: Option<usize>,
        /// Override the configuration's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Print every quantity, not only failures.
        #[arg(long, short)]
        verbose: bool,
    },
    /// List the available experiments and their geometry fields.
    List {
        /// Emit the catalog as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, out, threads, seed, verbose } => {
            run(&config, out, threads, seed, verbose)
        }
        Command::List { json } => list(json),
    }
}

fn list(json: bool) -> ExitCode {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&EXPERIMENTS.to_vec()).expect("catalog serializes")
        );
    } else {
        let width = EXPERIMENTS.iter().map(|i| i.name.len()).max().unwrap_or(0);
        for info in EXPERIMENTS {
            println!("{:width$}  {}", info.name, info.summary);
            println!("{:width$}  geometry: {}", "", info.geometry);
        }
    }
    ExitCode::SUCCESS
}

fn run(
    config_path: &PathBuf,
    out: Option<PathBuf>,
    threads: Option<usize>,
    seed: Option<u64>,
    verbose: bool,
) -> ExitCode {
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }

    let text = match std::fs::read_to_string(config_path) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", config_path.display());
            return ExitCode::from(2);
        }
    };
    let plan = match config::load(&text, seed) {
        Ok(plan) => plan,
        Err(e) => {
            eprintln!("config error at {e}");
            return ExitCode::from(2);
        }
    };

    let report = match config::execute(&plan) {
        Ok(report) => report,
        Err(e) => {
            eprintln!("config error at $.geometry: {e}");
            return ExitCode::from(2);
        }
    };

    print_summary(&report, verbose);

    let output = out.or(plan.output);
    if let Some(path) = &output {
        let mut body = serde_json::to_string_pretty(&report).expect("report serializes");
        body.push('\n');
        if let Err(e) = std::fs::write(path, body) {
            eprintln!("error: cannot write report to {}: {e}", path.display());
            return ExitCode::from(2);
        }
        println!("report written to {}", path.display());
    }

    match report.first_failure() {
        None => ExitCode::SUCCESS,
        Some((name, q)) => {
            eprintln!("FAIL {name} = {:e} (tolerance {:e})", q.value, q.tolerance);
            ExitCode::from(1)
        }
    }
}

fn print_summary(report: &ExperimentReport, verbose: bool) {
    let total = report.quantities.len();
    let passed = report.quantities.values().filter(|q| q.pass).count();
    let support = report.support_sizes.iter().max().copied().unwrap_or(0);
    println!(
        "{}: {passed}/{total} quantities pass (max support {support}, {} ms)",
        report.experiment, report.wall_ms
    );
    for (name, q) in &report.quantities {
        if verbose || !q.pass {
            let status = if q.pass { "  ok " } else { " FAIL" };
            println!("{status} {name} = {:.3e} (tolerance {:.3e})", q.value, q.tolerance);
        }
    }
}
