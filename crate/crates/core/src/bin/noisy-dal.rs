use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use noisy_dal::grid::{describe, run_grid, ExperimentGrid, WORKERS_ENV};
use noisy_dal::report::emit_report;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const USAGE_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

/// Deep active learning with vision transformers under label noise.
#[derive(Parser, Debug)]
#[command(name = "noisy-dal", version, about, after_help = format!(
    "Exit codes: 0 success, 1 usage or parse error, 2 runtime failure.\n\
     {WORKERS_ENV}=<n> overrides the number of concurrent runs."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every cell of a grid file, skipping cells already completed.
    Run {
        grid: PathBuf,
        /// Only print the final summary.
        #[arg(short, long)]
        quiet: bool,
    },
    /// Write tables and charts for a results directory.
    Report { results: PathBuf },
    /// Parse and check a grid file without running it.
    Validate { grid: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE_ERROR),
            };
        }
    };
    match cli.command {
        Command::Run { grid, quiet } => run(&grid, quiet),
        Command::Report { results } => match emit_report(&results) {
            Ok(summary) => {
                println!(
                    "wrote {} files to {} ({} models, {} noise rates, {} strategies)",
                    summary.files.len(),
                    summary.dir.display(),
                    summary.models.len(),
                    summary.noise_rates.len(),
                    summary.strategies.len()
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(RUNTIME_ERROR, &e),
        },
        Command::Validate { grid } => {
            let checked = ExperimentGrid::load(&grid).and_then(|g| g.validate().map(|_| g));
            match checked {
                Ok(g) => {
                    print!("{}", describe(&g));
                    println!("ok");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(USAGE_ERROR, &e),
            }
        }
    }
}

fn run(path: &PathBuf, quiet: bool) -> ExitCode {
    let grid = match ExperimentGrid::load(path) {
        Ok(g) => g,
        Err(e) => return fail(USAGE_ERROR, &e),
    };
    if !quiet {
        eprint!("{}", describe(&grid));
    }
    let progress = |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    };
    match run_grid(&grid, &progress) {
        Ok(s) => {
            println!(
                "{} runs ({} skipped, {} completed), {} rows in {}",
                s.total,
                s.skipped,
                s.completed,
                s.rows,
                grid.output.join(noisy_dal::grid::RESULTS_FILE).display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(RUNTIME_ERROR, &e),
    }
}

fn fail(code: u8, e: &noisy_dal::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code)
}
