use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tjap_core::harness::{resolve_threads, run_experiment, verify_output, CellReport, CellStatus, RunConfig};
use tjap_core::TjapError;

/// Transfer joint assortment-pricing experiments.
#[derive(Parser)]
#[command(name = "tjap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads (TJAP_THREADS takes precedence).
    #[arg(long, global = true)]
    parallel: Option<usize>,

    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment config.
    Run { config: PathBuf },
    /// Recompute the aggregate from run files and compare.
    Verify { outdir: PathBuf },
    /// Print the default config as JSON.
    PrintDefaultConfig,
}

const EXIT_PARTIAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::PrintDefaultConfig => {
            println!("{}", RunConfig::default().to_json());
            ExitCode::SUCCESS
        }
        Command::Run { ref config } => run(&cli, config),
        Command::Verify { ref outdir } => match verify_output(outdir) {
            Ok(report) => {
                if !cli.quiet {
                    println!(
                        "ok: {} runs, {} aggregate rows, max relative gap {:.2e}",
                        report.runs, report.aggregate_rows, report.max_relative_gap
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("tjap: {e}");
                ExitCode::from(EXIT_PARTIAL)
            }
        },
    }
}

fn run(cli: &Cli, path: &PathBuf) -> ExitCode {
    let config = match std::fs::read_to_string(path)
        .map_err(TjapError::from)
        .and_then(|text| RunConfig::from_json(&text))
    {
        Ok(c) => c,
        Err(e) => {
            eprintln!("tjap: {}: {e}", path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let threads = match resolve_threads(cli.parallel, &config) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("tjap: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out = cli.out.clone().unwrap_or_else(|| config.output_dir.clone());
    let quiet = cli.quiet;
    let progress = move |c: &CellReport| {
        if quiet {
            return;
        }
        match c.status {
            CellStatus::Ok => eprintln!(
                "{} H={} rep={} cum_regret={:.3} ({:.1}s)",
                c.algorithm,
                c.h,
                c.repetition,
                c.final_cum_regret.unwrap_or(f64::NAN),
                c.wall_clock_seconds
            ),
            CellStatus::Failed => eprintln!(
                "{} H={} rep={} FAILED: {}",
                c.algorithm,
                c.h,
                c.repetition,
                c.error.as_deref().unwrap_or("unknown error")
            ),
        }
    };
    match run_experiment(&config, &out, threads, Some(&progress)) {
        Ok(manifest) => {
            let failed = manifest.failed_cells();
            if !quiet {
                println!(
                    "{} cells, {failed} failed, {:.1}s on {threads} threads; output in {}",
                    manifest.cells.len(),
                    manifest.wall_clock_seconds,
                    out.display()
                );
            }
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_PARTIAL)
            }
        }
        Err(e @ TjapError::Config(_)) => {
            eprintln!("tjap: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("tjap: {e}");
            ExitCode::from(EXIT_PARTIAL)
        }
    }
}
